mod common;

use common::*;
use sgame::estimator::{
    e_step, fit_ball_constrained, fit_lasso, lambda_all_zero, lambda_max, m_step_experts, nll, penalized_nll,
    select_ball, FitConfig,
};
use sgame::{Bounds, Data, Matrix, Params, PreparedModel};

fn cfg(restarts: usize) -> FitConfig {
    FitConfig {
        restarts,
        max_em_iters: 1000,
        em_tol: 1e-10,
        inner_iters: 50,
        ..FitConfig::default()
    }
}

fn assert_monotone(trace: &[f64]) {
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-8, "trace increased: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn single_component_unpenalized_fit_is_ols() {
    let truth = linear_truth(0.3, &[1.0, -2.0, 0.0], 0.5);
    let data = simulate(&truth, 300, 1);
    let fit = fit_lasso(&data, 1, 0.0, &truth.bounds, &cfg(1)).unwrap();
    let want = ols(&data, None);
    let got = &fit.params.experts;
    assert!((got.intercepts[(0, 0)] - want[0]).abs() < 1e-6);
    for j in 0..3 {
        assert!((got.slopes[0][(0, j)] - want[j + 1]).abs() < 1e-6, "slope {j}");
    }
    assert_monotone(&fit.penalized_nll_trace);
}

#[test]
fn m_step_single_component_is_weighted_ols() {
    let truth = linear_truth(-0.5, &[0.7, 0.2], 1.0);
    let data = simulate(&truth, 200, 2);
    let w: Vec<f64> = (0..200).map(|i| 0.2 + (i % 7) as f64 / 7.0).collect();
    let resp = Matrix::from_vec(200, 1, w.clone());
    let c = FitConfig {
        inner_iters: 500,
        ..FitConfig::default()
    };
    let out = m_step_experts(&resp, &data, &truth.experts, 0.0, &truth.bounds, &c).unwrap();
    let want = ols(&data, Some(&w));
    assert!((out.intercepts[(0, 0)] - want[0]).abs() < 1e-9);
    assert!((out.slopes[0][(0, 0)] - want[1]).abs() < 1e-9);
    assert!((out.slopes[0][(0, 1)] - want[2]).abs() < 1e-9);
}

#[test]
fn penalty_is_additive() {
    let truth = two_expert_truth(3, 0.5);
    let data = simulate(&truth, 50, 3);
    let base = nll(&truth, &data).unwrap();
    for lambda in [0.0, 0.1, 2.5] {
        let v = penalized_nll(&truth, &data, lambda).unwrap();
        assert!((v - base - lambda * truth.penalized_l1()).abs() < 1e-12);
    }
    assert!(penalized_nll(&truth, &data, -1.0).is_err());
}

#[test]
fn duplicating_rows_keeps_the_objective() {
    let truth = two_expert_truth(3, 0.5);
    let data = simulate(&truth, 40, 4);
    let twice = data.repeated(2);
    let a = penalized_nll(&truth, &data, 0.3).unwrap();
    let b = penalized_nll(&truth, &twice, 0.3).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn e_step_rows_are_posteriors() {
    let truth = two_expert_truth(3, 0.5);
    let data = simulate(&truth, 30, 5);
    let r = e_step(&truth, &data).unwrap();
    let model = PreparedModel::new(&truth).unwrap();
    for i in 0..30 {
        assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let terms = model.component_log_terms(data.x(i), data.y(i)).unwrap();
        let total = model.log_density(data.x(i), data.y(i)).unwrap();
        for k in 0..2 {
            assert!((r[(i, k)] - (terms[k] - total).exp()).abs() < 1e-12);
        }
    }
}

#[test]
fn large_lambda_zeroes_every_slope() {
    let truth = two_expert_truth(4, 0.5);
    let data = simulate(&truth, 200, 6);
    let lam = 10.0 * lambda_max(&data, &truth.bounds).unwrap();
    let fit = fit_lasso(&data, 1, lam, &truth.bounds, &cfg(2)).unwrap();
    assert_eq!(fit.active_count(), 0);
    let big = lambda_all_zero(&data, &truth.bounds);
    let fit = fit_lasso(&data, 2, big, &truth.bounds, &cfg(2)).unwrap();
    assert_eq!(fit.active_count(), 0);
    assert_monotone(&fit.penalized_nll_trace);
}

#[test]
fn active_set_shrinks_with_lambda() {
    let truth = two_expert_truth(5, 0.5);
    let data = simulate(&truth, 300, 7);
    let lmax = lambda_max(&data, &truth.bounds).unwrap();
    let mut last = usize::MAX;
    for lam in [0.0, lmax / 10.0, lmax] {
        let fit = fit_lasso(&data, 1, lam, &truth.bounds, &cfg(1)).unwrap();
        assert_monotone(&fit.penalized_nll_trace);
        assert!(fit.active_count() <= last, "λ = {lam}");
        last = fit.active_count();
    }
    assert_eq!(last, 0);
}

#[test]
fn identical_seeds_give_identical_fits() {
    let truth = two_expert_truth(3, 0.5);
    let data = simulate(&truth, 150, 8);
    let a = fit_lasso(&data, 2, 0.01, &truth.bounds, &cfg(3)).unwrap();
    let b = fit_lasso(&data, 2, 0.01, &truth.bounds, &cfg(3)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

fn labelled(psi: &Params, n: usize, seed: u64) -> (Data, Vec<usize>) {
    let mut r = rng(seed);
    let x = sgame::uniform_design(n, psi.p(), &mut r);
    let model = PreparedModel::new(psi).unwrap();
    let mut y = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (k, yi) = model.sample_with_component(x.row(i), &mut r).unwrap();
        labels.push(k);
        y.extend(yi);
    }
    (Data::new(x, Matrix::from_vec(n, 1, y)).unwrap(), labels)
}

#[test]
fn recovers_well_separated_experts() {
    let truth = two_expert_truth(2, 0.25);
    let (data, labels) = labelled(&truth, 2000, 9);
    let fit = fit_lasso(&data, 2, 0.0, &truth.bounds, &cfg(3)).unwrap();
    let est = &fit.params.experts;
    // match components by intercept sign
    let order: Vec<usize> = if est.intercepts[(0, 0)] < est.intercepts[(1, 0)] { vec![0, 1] } else { vec![1, 0] };
    for (k, &kk) in order.iter().enumerate() {
        let idx: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == k).collect();
        let oracle = ols(&data.select(&idx), None);
        let truth_row: Vec<f64> =
            std::iter::once(truth.experts.intercepts[(k, 0)]).chain(truth.experts.slopes[k].row(0).iter().copied()).collect();
        let est_row: Vec<f64> =
            std::iter::once(est.intercepts[(kk, 0)]).chain(est.slopes[kk].row(0).iter().copied()).collect();
        for j in 0..truth_row.len() {
            assert!((oracle[j] - truth_row[j]).abs() <= 0.1, "oracle coord {j}");
            assert!((est_row[j] - truth_row[j]).abs() <= 0.1, "component {k} coord {j}: {} vs {}", est_row[j], truth_row[j]);
        }
    }
}

#[test]
fn ball_fit_with_large_radius_is_unconstrained() {
    let truth = linear_truth(0.3, &[1.0, -0.5], 0.5);
    let data = simulate(&truth, 200, 10);
    let ball = fit_ball_constrained(&data, 1, 100, &truth.bounds, &cfg(1)).unwrap();
    let lasso = fit_lasso(&data, 1, 0.0, &truth.bounds, &cfg(1)).unwrap();
    assert!((ball.nll - lasso.nll).abs() < 1e-8);
}

#[test]
fn ball_fit_saturates_small_radius() {
    let truth = linear_truth(0.0, &[3.0, -2.0], 0.5);
    let data = simulate(&truth, 200, 11);
    let fit = fit_ball_constrained(&data, 1, 1, &truth.bounds, &cfg(1)).unwrap();
    assert!((fit.penalized_l1 - 1.0).abs() < 1e-10, "{}", fit.penalized_l1);
    assert_monotone(&fit.penalized_nll_trace);
}

#[test]
fn ball_selection_matches_recomputation() {
    let truth = two_expert_truth(3, 0.5);
    let data = simulate(&truth, 200, 12);
    let grid = [1, 2, 4, 8];
    let (lambda, eta) = (0.02, 1e-3);
    let sel = select_ball(&data, 2, &grid, lambda, eta, &truth.bounds, &cfg(2)).unwrap();
    let crit: Vec<f64> = grid
        .iter()
        .map(|&m| fit_ball_constrained(&data, 2, m, &truth.bounds, &cfg(2)).unwrap().nll + lambda * m as f64)
        .collect();
    let min = crit.iter().copied().fold(f64::INFINITY, f64::min);
    let want = crit.iter().position(|&c| c <= min + eta).unwrap();
    assert_eq!(sel.index, want);
    for (m, c) in grid.iter().zip(&crit) {
        assert!(sel.criteria[sel.index] <= c + eta, "m = {m}");
    }
}

#[test]
fn ball_selection_tie_goes_to_smallest_radius() {
    // a null truth: every radius fits equally well up to λ·m
    let truth = linear_truth(0.0, &[0.0, 0.0], 1.0);
    let data = simulate(&truth, 100, 13);
    let sel = select_ball(&data, 1, &[1, 2, 4], 0.0, 1.0, &truth.bounds, &cfg(1)).unwrap();
    assert_eq!(sel.m_hat, 1);
}

#[test]
fn bounds_without_room_are_rejected() {
    assert!(Bounds::new(1.0, 1.0, 2.0, 1.0, 2).is_err());
}
