mod common;

use common::*;
use sgame::bounds::tail_bound;
use sgame::divergence::{entropy_constants, KlMethod};
use sgame::estimator::{fit_lasso, fit_lasso_from, FitConfig};
use sgame::verify::*;
use sgame::{Bounds, Matrix, Params, PreparedModel};

fn standard_normal() -> Params {
    let b = Bounds::new(1.0, 1.0, 0.5, 2.0, 1).unwrap();
    Params::zeros(1, 1, b)
}

#[test]
fn single_gate_has_zero_gating_gradient() {
    let b = Bounds::new(2.0, 3.0, 0.25, 5.0, 1).unwrap();
    let psi = random_params(4, 2, &b, &mut rng(0));
    let g = PreparedModel::new(&psi).unwrap().gradient(&[0.1, 0.2, 0.3, 0.4], &[1.0, -2.0]).unwrap();
    assert!(g[psi.layout().gamma_range()].iter().all(|&v| v == 0.0));
}

#[test]
fn random_params_are_in_class() {
    let b = Bounds::new(2.0, 3.0, 0.25, 5.0, 3).unwrap();
    for s in 0..200 {
        random_params(6, 2, &b, &mut rng(s)).check_bounds().unwrap();
    }
}

#[test]
fn gradient_envelope_suite_q1() {
    let b = Bounds::new(2.0, 3.0, 0.25, 5.0, 2).unwrap();
    let r = verify_gradient_envelope(&b, 1, 2, 5, 1000, 1).unwrap();
    assert_eq!(r.violations, 0);
    assert!(r.worst_case < 1.0);
    assert!(verify_gradient_envelope(&b, 1, 2, 5, 99, 1).is_err());
}

#[test]
fn tail_suite_with_huge_truncation_sees_nothing() {
    let psi = default_truth();
    let x = sgame::uniform_design(20, 10, &mut rng(1));
    let r = verify_tail_bound(&psi, &x, 1e6, 10_000, 2).unwrap();
    assert_eq!(r.details["estimate"], 0.0);
    assert_eq!(r.violations, 0);
}

#[test]
fn tail_suite_matches_two_sided_normal_tail() {
    let psi = standard_normal();
    let x = Matrix::from_vec(1, 1, vec![0.5]);
    let r = verify_tail_bound(&psi, &x, 3.0, 200_000, 3).unwrap();
    let est = r.details["estimate"].as_f64().unwrap();
    let se = r.details["std_error"].as_f64().unwrap();
    let exact = libm::erfc(3.0 / 2f64.sqrt());
    assert!((est - exact).abs() < 4.0 * se, "{est} vs {exact}");
    let bound = r.details["bound"].as_f64().unwrap();
    assert_eq!(bound, tail_bound(3.0, 1, 1, 1, &psi.bounds));
    let verbatim = 2.0 * psi.bounds.a_gamma_sup * (-(9.0 - 6.0 * psi.bounds.a_beta_sup) / (2.0 * psi.bounds.a_sigma_max)).exp();
    assert!((bound - verbatim).abs() < 1e-15);
}

#[test]
fn entropy_of_standard_normal() {
    let psi = standard_normal();
    let x = Matrix::from_vec(1, 1, vec![0.3]);
    let r = verify_entropy_bound(&psi, &x, 100_000, 4).unwrap();
    let est = r.witness.as_ref().unwrap()["estimate"].as_f64().unwrap();
    let se = r.witness.as_ref().unwrap()["std_error"].as_f64().unwrap();
    let exact = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!((est - exact).abs() < 4.0 * se);
    assert_eq!(r.violations, 0);
}

#[test]
fn entropy_suite_with_tight_covariances() {
    let b = Bounds::new(1.0, 2.0, 4.0, 20.0, 3).unwrap();
    let psi = random_params(3, 1, &b, &mut rng(5));
    let x = sgame::uniform_design(10, 3, &mut rng(6));
    assert_eq!(verify_entropy_bound(&psi, &x, 10_000, 7).unwrap().violations, 0);
    for q in 1..5 {
        assert!(entropy_constants(&b, q).1 >= 0.0);
    }
}

#[test]
fn product_integral_symmetric_case() {
    let one = Matrix::from_diag(&[1.0]);
    let v = product_integral(&[0.0], &one, &[0.0], &one, PRODUCT_NODES).unwrap();
    assert!((v - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
}

#[test]
fn product_integral_converges_with_nodes() {
    let a = Matrix::from_diag(&[0.3]);
    let b = Matrix::from_diag(&[0.2]);
    let exact = sgame::divergence::gaussian_product_constant(&[0.4], &a, &[-0.7], &b).unwrap();
    let errs: Vec<f64> = [9, 17, 33]
        .iter()
        .map(|&n| (product_integral(&[0.4], &a, &[-0.7], &b, n).unwrap() - exact).abs())
        .collect();
    assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
}

#[test]
fn product_suite_passes() {
    let r = verify_product_constant(50, 8).unwrap();
    assert_eq!(r.violations, 0);
    assert!(r.worst_case <= PRODUCT_TOLERANCE);
    assert_eq!(r.details["domination_violations"], 0);
}

#[test]
fn weyl_suite_and_trivial_cases() {
    assert_eq!(verify_weyl(1000, 4, 9).unwrap().violations, 0);
    let a = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, -3.0]);
    let e = |m: &nalgebra::DMatrix<f64>| nalgebra::SymmetricEigen::new(m.clone()).eigenvalues;
    let (ea, ez) = (e(&a), e(&(&a - &a)));
    assert!(ez.min() >= ea.min() - ea.max());
    assert_eq!(e(&(&a + nalgebra::DMatrix::zeros(2, 2))), ea);
}

#[test]
fn em_suite_and_warm_restart() {
    let truth = two_expert_truth(3, 0.5);
    let data = vec![simulate(&truth, 150, 10), simulate(&truth, 150, 11)];
    let cases = [
        EmCase { k: 1, lambda: EmLambda::Value(0.0) },
        EmCase { k: 2, lambda: EmLambda::MaxFraction(0.1) },
    ];
    let cfg = FitConfig { restarts: 2, ..FitConfig::default() };
    let r = verify_em_monotonicity(&data, &cases, &truth.bounds, &cfg).unwrap();
    assert_eq!((r.trials, r.violations), (4, 0));

    let tight = FitConfig { restarts: 1, em_tol: 1e-12, max_em_iters: 5000, ..FitConfig::default() };
    let fit = fit_lasso(&data[0], 1, 0.0, &truth.bounds, &tight).unwrap();
    // exact EM on one component: one step lands on the optimum
    assert!(fit.penalized_nll_trace.len() <= 3);
    let again = fit_lasso_from(&data[0], &fit.params, 0.0, &tight).unwrap();
    assert!(again.penalized_nll_trace.len() <= 2);
    let drop = again.penalized_nll_trace[0] - again.final_penalized_nll;
    assert!(drop <= 1e-12 * again.final_penalized_nll.abs().max(1.0));
}

fn small_experiment() -> ExperimentConfig {
    ExperimentConfig {
        n_grid: vec![40, 80],
        replications: 10,
        kl_method: KlMethod::Quadrature { nodes: 401, truncation: None },
        fit_cfg: FitConfig { restarts: 1, max_em_iters: 100, ..FitConfig::default() },
        ..ExperimentConfig::default()
    }
}

#[test]
fn experiment_is_deterministic() {
    let cfg = small_experiment();
    let a = run_oracle_experiment(&cfg).unwrap();
    let b = run_oracle_experiment(&cfg).unwrap();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    let text = String::from_utf8(ca).unwrap();
    assert!(text.starts_with("n,lambda,rep_count,lhs_mean,lhs_se,rhs,rhs_term1,rhs_term2,rhs_term3,rhs_term4,holds\n"));
    assert!(a.all_hold());
    for r in &a.rows {
        let t = &r.rhs;
        assert_eq!(t.total, t.term1 + t.term2 + t.term3 + t.term4);
        assert_eq!(r.holds, r.lhs_mean + 2.0 * r.lhs_se <= t.total);
    }
}

#[test]
fn null_truth_at_lambda_min_matches_intercept_model() {
    let mut truth = default_truth();
    truth.gating.slopes.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    truth.experts.slopes.iter_mut().for_each(|m| m.as_mut_slice().iter_mut().for_each(|v| *v = 0.0));
    let cfg = ExperimentConfig { truth, ..small_experiment() };
    let at_min = run_oracle_experiment(&cfg).unwrap();
    let intercept_only = run_oracle_experiment(&ExperimentConfig {
        lambda_policy: LambdaPolicy::Grid { values: vec![1e12], kappa: 148.0 },
        ..cfg
    })
    .unwrap();
    for (a, b) in at_min.rows.iter().zip(&intercept_only.rows) {
        assert!((a.lhs_mean - b.lhs_mean).abs() <= 2.0 * b.lhs_se.max(1e-12));
    }
}

#[test]
fn experiment_rejects_few_replications() {
    let cfg = ExperimentConfig { replications: 9, ..small_experiment() };
    assert!(run_oracle_experiment(&cfg).is_err());
}

#[test]
fn grid_below_lambda_min_has_no_bound() {
    let cfg = ExperimentConfig {
        n_grid: vec![40],
        lambda_policy: LambdaPolicy::Grid { values: vec![0.01], kappa: 148.0 },
        ..small_experiment()
    };
    let r = run_oracle_experiment(&cfg).unwrap();
    assert!(r.rows[0].rhs.total.is_nan());
    assert!(!r.rows[0].holds);
}

#[test]
fn unknown_suite_is_an_error() {
    assert!(run_suite("bogus", &VerifyConfig::default()).is_err());
}

#[test]
fn reports_round_trip_through_json() {
    let r = verify_weyl(100, 3, 12).unwrap();
    let s = serde_json::to_string(&r).unwrap();
    let back: LemmaReport = serde_json::from_str(&s).unwrap();
    assert_eq!(back, r);
    for key in ["suite", "trials", "violations", "worst_case", "witness"] {
        assert!(s.contains(&format!("\"{key}\"")));
    }
}
