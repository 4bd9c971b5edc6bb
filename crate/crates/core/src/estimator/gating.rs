use crate::error::{Result, SgameError};
use crate::linalg::{project_l1_ball, Matrix};
use crate::model::{GatingParams, ParameterBounds};
use crate::scalar::{log_sum_exp, soft_threshold};

use super::FitConfig;

/// Weighted multinomial-logistic loss −(1/n) Σ_i Σ_k r_ik ln g_k(x_i; γ).
pub fn gating_loss(resp: &Matrix<f64>, design: &Matrix<f64>, gating: &GatingParams<f64>) -> f64 {
    loss_and_grad(resp, design, gating, false).0
}

/// Gating part of the EM surrogate: [`gating_loss`] + λ Σ_kj |γ_kj|.
pub fn gating_objective(resp: &Matrix<f64>, design: &Matrix<f64>, gating: &GatingParams<f64>, lambda: f64) -> f64 {
    let l1: f64 = gating.slopes.as_slice().iter().map(|v| v.abs()).sum();
    gating_loss(resp, design, gating) + lambda * l1
}

fn loss_and_grad(
    resp: &Matrix<f64>,
    design: &Matrix<f64>,
    gating: &GatingParams<f64>,
    want_grad: bool,
) -> (f64, Vec<f64>, Matrix<f64>) {
    let (n, k, p) = (design.rows(), gating.intercepts.len(), design.cols());
    let mut loss = 0.0;
    let mut g0 = vec![0.0; if want_grad { k } else { 0 }];
    let mut gs = if want_grad { Matrix::zeros(k, p) } else { Matrix::zeros(0, 0) };
    let mut w = vec![0.0; k];
    for i in 0..n {
        let x = design.row(i);
        let r = resp.row(i);
        for (kk, wk) in w.iter_mut().enumerate() {
            *wk = gating.intercepts[kk] + gating.slopes.row(kk).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let lse = log_sum_exp(&w);
        let mass: f64 = r.iter().sum();
        for kk in 0..k {
            loss -= r[kk] * (w[kk] - lse);
            if want_grad {
                let d = mass * (w[kk] - lse).exp() - r[kk];
                g0[kk] += d;
                for (gj, xj) in gs.row_mut(kk).iter_mut().zip(x) {
                    *gj += d * xj;
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    g0.iter_mut().for_each(|v| *v *= inv);
    gs.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    (loss * inv, g0, gs)
}

/// Proximal map of t·λ‖slopes‖₁ plus the indicator of |γ_k0| + ‖γ_k‖₁ ≤ A_γ,
/// row by row. Soft-thresholding followed by the l1-ball projection is the
/// exact joint proximal map because both act as thresholds on magnitudes.
fn prox(intercepts: &mut [f64], slopes: &mut Matrix<f64>, threshold: f64, radius: f64) {
    let mut row = Vec::with_capacity(slopes.cols() + 1);
    for k in 0..intercepts.len() {
        row.clear();
        row.push(intercepts[k]);
        row.extend(slopes.row(k).iter().map(|&v| soft_threshold(v, threshold)));
        let projected = project_l1_ball(&row, radius);
        intercepts[k] = projected[0];
        slopes.row_mut(k).copy_from_slice(&projected[1..]);
    }
}

/// Approximately minimizes the gating surrogate by at most `cfg.inner_iters`
/// proximal-gradient steps with backtracking. Every accepted step satisfies
/// the sufficient-decrease condition, so the surrogate never increases from
/// a feasible `init`.
pub fn m_step_gating(
    resp: &Matrix<f64>,
    design: &Matrix<f64>,
    init: &GatingParams<f64>,
    lambda: f64,
    bounds: &ParameterBounds<f64>,
    cfg: &FitConfig,
) -> Result<GatingParams<f64>> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(SgameError::NegativeLambda(lambda));
    }
    if resp.rows() != design.rows() {
        return Err(SgameError::dim("responsibility rows", design.rows(), resp.rows()));
    }
    if resp.cols() != init.intercepts.len() {
        return Err(SgameError::dim("responsibility columns", init.intercepts.len(), resp.cols()));
    }
    let mut cur = init.clone();
    if cur.intercepts.len() == 1 {
        // a single gate is identically one
        cur.intercepts[0] = 0.0;
        cur.slopes.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        return Ok(cur);
    }
    // (1 + ‖x‖²)/2 bounds the curvature of the softmax loss
    let max_sq = (0..design.rows())
        .map(|i| design.row(i).iter().map(|v| v * v).sum::<f64>())
        .fold(0.0f64, f64::max);
    let mut step = 4.0 / (1.0 + max_sq);
    for _ in 0..cfg.inner_iters {
        let (f, g0, gs) = loss_and_grad(resp, design, &cur, true);
        if !f.is_finite() {
            return Err(SgameError::NonFinite("gating loss".into()));
        }
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = cur.clone();
            for (c, g) in cand.intercepts.iter_mut().zip(&g0) {
                *c -= step * g;
            }
            for (c, g) in cand.slopes.as_mut_slice().iter_mut().zip(gs.as_slice()) {
                *c -= step * g;
            }
            prox(&mut cand.intercepts, &mut cand.slopes, step * lambda, bounds.a_gamma_sup);
            let d0 = cand.intercepts.iter().zip(&cur.intercepts).map(|(a, b)| a - b);
            let ds = cand.slopes.as_slice().iter().zip(cur.slopes.as_slice()).map(|(a, b)| a - b);
            let grads = g0.iter().chain(gs.as_slice());
            let (mut lin, mut sq) = (0.0, 0.0);
            for (d, g) in d0.chain(ds).zip(grads) {
                lin += g * d;
                sq += d * d;
            }
            let fc = gating_loss(resp, design, &cand);
            if fc <= f + lin + sq / (2.0 * step) + 2.0 * f64::EPSILON * f.abs() {
                accepted = Some((cand, sq));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, sq)) = accepted else { break };
        cur = cand;
        if sq.sqrt() < 1e-13 {
            break;
        }
        step *= 1.5;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SgameParams;

    fn bounds(k: usize) -> ParameterBounds<f64> {
        ParameterBounds::new(5.0, 5.0, 0.1, 10.0, k).unwrap()
    }

    fn design() -> Matrix<f64> {
        Matrix::from_vec(6, 2, vec![0.1, 0.9, 0.4, 0.2, 0.8, 0.5, 0.3, 0.3, 0.9, 0.1, 0.6, 0.7])
    }

    #[test]
    fn uniform_responsibilities_keep_zero_gates() {
        let resp = Matrix::from_vec(6, 3, vec![1.0 / 3.0; 18]);
        let init = SgameParams::zeros(2, 1, bounds(3)).gating;
        let out = m_step_gating(&resp, &design(), &init, 0.0, &bounds(3), &FitConfig::default()).unwrap();
        assert!(out.intercepts.iter().chain(out.slopes.as_slice()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn huge_lambda_leaves_intercept_only_logits() {
        let r = [0.2, 0.8];
        let resp = Matrix::from_vec(6, 2, (0..6).flat_map(|_| r).collect());
        let init = SgameParams::zeros(2, 1, bounds(2)).gating;
        let cfg = FitConfig {
            inner_iters: 2000,
            ..FitConfig::default()
        };
        let out = m_step_gating(&resp, &design(), &init, 1e6, &bounds(2), &cfg).unwrap();
        assert!(out.slopes.as_slice().iter().all(|&v| v == 0.0));
        let diff = out.intercepts[1] - out.intercepts[0];
        assert!((diff - (0.8f64 / 0.2).ln()).abs() < 1e-6, "{diff}");
    }

    #[test]
    fn descent_from_init() {
        let resp = Matrix::from_vec(6, 2, vec![0.9, 0.1, 0.3, 0.7, 0.2, 0.8, 0.6, 0.4, 0.05, 0.95, 0.5, 0.5]);
        let mut init = SgameParams::zeros(2, 1, bounds(2)).gating;
        init.slopes[(0, 1)] = 0.7;
        init.intercepts[1] = -0.3;
        for lambda in [0.0, 0.01, 0.1] {
            let before = gating_objective(&resp, &design(), &init, lambda);
            let cfg = FitConfig {
                inner_iters: 3,
                ..FitConfig::default()
            };
            let out = m_step_gating(&resp, &design(), &init, lambda, &bounds(2), &cfg).unwrap();
            assert!(gating_objective(&resp, &design(), &out, lambda) <= before + 1e-10);
        }
    }

    #[test]
    fn respects_gating_cap() {
        let resp = Matrix::from_vec(6, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let b = ParameterBounds::new(0.5, 5.0, 0.1, 10.0, 2).unwrap();
        let init = SgameParams::zeros(2, 1, b).gating;
        let cfg = FitConfig {
            inner_iters: 500,
            ..FitConfig::default()
        };
        let out = m_step_gating(&resp, &design(), &init, 0.0, &b, &cfg).unwrap();
        for k in 0..2 {
            let l1 = out.intercepts[k].abs() + out.slopes.row(k).iter().map(|v| v.abs()).sum::<f64>();
            assert!(l1 <= 0.5 + 1e-12);
        }
    }
}
