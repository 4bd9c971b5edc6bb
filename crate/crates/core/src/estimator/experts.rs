use crate::dataset::Dataset;
use crate::error::{Result, SgameError};
use crate::linalg::{clip_spectrum, Cholesky, Matrix};
use crate::model::{ExpertParams, ParameterBounds};
use crate::scalar::soft_threshold;

use super::FitConfig;

/// Below this total responsibility a component is treated as empty.
pub const EMPTY_COMPONENT_MASS: f64 = 1e-10;

/// Expert part of the EM surrogate:
/// (1/n) Σ_i Σ_k r_ik [−ln φ(y_i; m_k(x_i), Σ_k)] + λ Σ_k ‖β_k‖₁.
pub fn expert_objective(resp: &Matrix<f64>, data: &Dataset<f64>, experts: &ExpertParams<f64>, lambda: f64) -> Result<f64> {
    let q = data.q();
    let half_log_2pi = 0.5 * std::f64::consts::TAU.ln();
    let mut total = 0.0;
    for (k, sigma) in experts.covariances.iter().enumerate() {
        let c = Cholesky::new(sigma).ok_or(SgameError::NotPositiveDefinite { component: k })?;
        let norm = q as f64 * half_log_2pi + 0.5 * c.log_det();
        for i in 0..data.n() {
            let w = resp[(i, k)];
            if w == 0.0 {
                continue;
            }
            let r = residual(experts, k, data.x(i), data.y(i));
            total += w * (norm + 0.5 * c.mahalanobis_sq(&r));
        }
    }
    let l1: f64 = experts.slopes.iter().flat_map(|m| m.as_slice()).map(|v| v.abs()).sum();
    Ok(total / data.n() as f64 + lambda * l1)
}

fn residual(experts: &ExpertParams<f64>, k: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
    let bx = experts.slopes[k].matvec(x);
    (0..y.len()).map(|z| y[z] - experts.intercepts[(k, z)] - bx[z]).collect()
}

/// ½vᵀAv − hᵀv + λ|v₁| for the (intercept, slope) block.
struct Block {
    a00: f64,
    a01: f64,
    a11: f64,
    h0: f64,
    h1: f64,
    lambda: f64,
}

impl Block {
    fn value(&self, v0: f64, v1: f64) -> f64 {
        0.5 * (self.a00 * v0 * v0 + 2.0 * self.a01 * v0 * v1 + self.a11 * v1 * v1) - self.h0 * v0 - self.h1 * v1
            + self.lambda * v1.abs()
    }

    /// Exact minimizer over |v₀| + |v₁| ≤ c.
    fn solve(&self, c: f64) -> (f64, f64) {
        let reduced = self.a11 - self.a01 * self.a01 / self.a00;
        let v1 = if reduced > 1e-14 * self.a11.max(f64::MIN_POSITIVE) {
            let h = self.h1 - self.a01 * self.h0 / self.a00;
            soft_threshold(h, self.lambda) / reduced
        } else {
            // slope column collinear with the intercept under these weights
            0.0
        };
        let v0 = (self.h0 - self.a01 * v1) / self.a00;
        if v0.abs() + v1.abs() <= c {
            return (v0, v1);
        }
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for s0 in [-1.0, 1.0] {
            for s1 in [-1.0, 1.0] {
                // v₁ = s1·u, v₀ = s0·(c − u), u ∈ [0, c]
                let s = s0 * s1;
                let den = self.a00 - 2.0 * self.a01 * s + self.a11;
                let num = self.a00 * c - self.a01 * s * c - self.h0 * s0 + self.h1 * s1 - self.lambda;
                let u = if den > 0.0 { (num / den).clamp(0.0, c) } else if num > 0.0 { c } else { 0.0 };
                let (w0, w1) = (s0 * (c - u), s1 * u);
                let f = self.value(w0, w1);
                if f < best.0 {
                    best = (f, w0, w1);
                }
            }
        }
        (best.1, best.2)
    }
}

/// Updates every expert given responsibilities. For each component, block
/// coordinate descent over (β_k0,z, [β_k]_zj) pairs minimizes the Σ_k⁻¹-weighted
/// least-squares surrogate with an l1 penalty on slopes and the row constraint
/// |β_k0,z| + ‖[β_k]_z·‖₁ ≤ A_β; each block is solved exactly. Σ_k is then the
/// weighted residual covariance with its spectrum clipped into
/// [1/A_Σ, 1/a_Σ], which is the exact constrained minimizer. Neither update
/// increases the surrogate.
pub fn m_step_experts(
    resp: &Matrix<f64>,
    data: &Dataset<f64>,
    init: &ExpertParams<f64>,
    lambda: f64,
    bounds: &ParameterBounds<f64>,
    cfg: &FitConfig,
) -> Result<ExpertParams<f64>> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(SgameError::NegativeLambda(lambda));
    }
    let (n, p, q) = (data.n(), data.p(), data.q());
    let k_n = init.covariances.len();
    if resp.rows() != n {
        return Err(SgameError::dim("responsibility rows", n, resp.rows()));
    }
    if resp.cols() != k_n {
        return Err(SgameError::dim("responsibility columns", k_n, resp.cols()));
    }
    let mut out = init.clone();
    let nf = n as f64;
    for k in 0..k_n {
        let w: Vec<f64> = (0..n).map(|i| resp[(i, k)]).collect();
        let mass: f64 = w.iter().sum();
        if !(mass >= EMPTY_COMPONENT_MASS) {
            return Err(SgameError::EmptyComponent {
                component: k,
                mass,
                restart: None,
            });
        }
        let chol = Cholesky::new(&init.covariances[k]).ok_or(SgameError::NotPositiveDefinite { component: k })?;
        let prec = chol.inverse();

        // start from a surrogate-feasible row
        for z in 0..q {
            let l1 = out.intercepts[(k, z)].abs() + out.slopes[k].row(z).iter().map(|v| v.abs()).sum::<f64>();
            if l1 > bounds.a_beta_sup {
                let f = if l1 > 0.0 { bounds.a_beta_sup / l1 } else { 0.0 };
                out.intercepts[(k, z)] *= f;
                out.slopes[k].row_mut(z).iter_mut().for_each(|v| *v *= f);
            }
        }

        let mut resid = Matrix::zeros(n, q);
        for i in 0..n {
            resid.row_mut(i).copy_from_slice(&residual(&out, k, data.x(i), data.y(i)));
        }
        let mut presid = Matrix::zeros(n, q);
        for i in 0..n {
            presid.row_mut(i).copy_from_slice(&prec.matvec(resid.row(i)));
        }
        let w_sum = mass / nf;
        let w_x: Vec<f64> = (0..p).map(|j| (0..n).map(|i| w[i] * data.x(i)[j]).sum::<f64>() / nf).collect();
        let w_xx: Vec<f64> = (0..p)
            .map(|j| (0..n).map(|i| w[i] * data.x(i)[j] * data.x(i)[j]).sum::<f64>() / nf)
            .collect();

        let apply = |z: usize, d0: f64, d1: f64, j: Option<usize>, resid: &mut Matrix<f64>, presid: &mut Matrix<f64>| {
            for i in 0..n {
                let delta = d0 + j.map_or(0.0, |j| d1 * data.x(i)[j]);
                if delta == 0.0 {
                    continue;
                }
                resid[(i, z)] -= delta;
                for a in 0..q {
                    presid[(i, a)] -= delta * prec[(a, z)];
                }
            }
        };

        for _sweep in 0..cfg.inner_iters.max(1) {
            let mut max_change = 0.0f64;
            let mut scale = 0.0f64;
            for z in 0..q {
                let pzz = prec[(z, z)];
                if p == 0 {
                    let h0 = (0..n).map(|i| w[i] * presid[(i, z)]).sum::<f64>() / nf;
                    let b0 = out.intercepts[(k, z)];
                    let a00 = pzz * w_sum;
                    let v0 = ((h0 + a00 * b0) / a00).clamp(-bounds.a_beta_sup, bounds.a_beta_sup);
                    apply(z, v0 - b0, 0.0, None, &mut resid, &mut presid);
                    out.intercepts[(k, z)] = v0;
                    max_change = max_change.max((v0 - b0).abs());
                    scale = scale.max(v0.abs());
                    continue;
                }
                for j in 0..p {
                    let b0 = out.intercepts[(k, z)];
                    let bj = out.slopes[k][(z, j)];
                    let g0 = (0..n).map(|i| w[i] * presid[(i, z)]).sum::<f64>() / nf;
                    let g1 = (0..n).map(|i| w[i] * data.x(i)[j] * presid[(i, z)]).sum::<f64>() / nf;
                    let blk = Block {
                        a00: pzz * w_sum,
                        a01: pzz * w_x[j],
                        a11: pzz * w_xx[j],
                        h0: 0.0,
                        h1: 0.0,
                        lambda,
                    };
                    // h = g + A·(current block)
                    let blk = Block {
                        h0: g0 + blk.a00 * b0 + blk.a01 * bj,
                        h1: g1 + blk.a01 * b0 + blk.a11 * bj,
                        ..blk
                    };
                    let others: f64 = out.slopes[k]
                        .row(z)
                        .iter()
                        .enumerate()
                        .filter(|&(l, _)| l != j)
                        .map(|(_, v)| v.abs())
                        .sum();
                    let cap = (bounds.a_beta_sup - others).max(0.0);
                    let (v0, v1) = blk.solve(cap);
                    // never accept a block move that the exact block value rejects
                    if blk.value(v0, v1) > blk.value(b0, bj) {
                        continue;
                    }
                    apply(z, v0 - b0, v1 - bj, Some(j), &mut resid, &mut presid);
                    out.intercepts[(k, z)] = v0;
                    out.slopes[k][(z, j)] = v1;
                    max_change = max_change.max((v0 - b0).abs()).max((v1 - bj).abs());
                    scale = scale.max(v0.abs()).max(v1.abs());
                }
            }
            if max_change <= 1e-13 * (1.0 + scale) {
                break;
            }
        }

        let mut cov = Matrix::zeros(q, q);
        for i in 0..n {
            let r = resid.row(i);
            for a in 0..q {
                for b in 0..=a {
                    cov[(a, b)] += w[i] * r[a] * r[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..=a {
                let v = cov[(a, b)] / mass;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        out.covariances[k] = clip_spectrum(&cov, bounds.sigma_eig_min(), bounds.sigma_eig_max(), 0.0).unwrap_or(cov);
    }
    Ok(out)
}

/// Smallest λ at which every expert slope is zero at the minimizer of the
/// expert surrogate (intercepts at their weighted means, covariances as in
/// `experts`). Ignores the A_β cap.
pub fn expert_lambda_max(resp: &Matrix<f64>, data: &Dataset<f64>, experts: &ExpertParams<f64>) -> Result<f64> {
    let (n, p, q) = (data.n(), data.p(), data.q());
    let mut best = 0.0f64;
    for (k, sigma) in experts.covariances.iter().enumerate() {
        let prec = Cholesky::new(sigma).ok_or(SgameError::NotPositiveDefinite { component: k })?.inverse();
        let mass: f64 = (0..n).map(|i| resp[(i, k)]).sum();
        if !(mass >= EMPTY_COMPONENT_MASS) {
            return Err(SgameError::EmptyComponent {
                component: k,
                mass,
                restart: None,
            });
        }
        let mean: Vec<f64> = (0..q).map(|z| (0..n).map(|i| resp[(i, k)] * data.y(i)[z]).sum::<f64>() / mass).collect();
        for z in 0..q {
            for j in 0..p {
                let mut g = 0.0;
                for i in 0..n {
                    let pr: f64 = (0..q).map(|a| prec[(z, a)] * (data.y(i)[a] - mean[a])).sum();
                    g += resp[(i, k)] * data.x(i)[j] * pr;
                }
                best = best.max((g / n as f64).abs());
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> ParameterBounds<f64> {
        ParameterBounds::new(5.0, 50.0, 1e-3, 1e3, 1).unwrap()
    }

    #[test]
    fn block_inside_matches_unconstrained() {
        let b = Block {
            a00: 2.0,
            a01: 0.5,
            a11: 1.0,
            h0: 1.0,
            h1: 0.8,
            lambda: 0.0,
        };
        let (v0, v1) = b.solve(100.0);
        // solve [[2, .5], [.5, 1]] v = [1, .8]
        let det = 2.0 - 0.25;
        assert!((v0 - (1.0 - 0.5 * 0.8) / det).abs() < 1e-14);
        assert!((v1 - (2.0 * 0.8 - 0.5) / det).abs() < 1e-14);
    }

    #[test]
    fn block_on_boundary_beats_grid() {
        let b = Block {
            a00: 1.0,
            a01: 0.3,
            a11: 0.7,
            h0: 3.0,
            h1: -2.0,
            lambda: 0.1,
        };
        let c = 1.0;
        let (v0, v1) = b.solve(c);
        assert!(v0.abs() + v1.abs() <= c + 1e-12);
        let best = b.value(v0, v1);
        for i in -200..=200 {
            for j in -200..=200 {
                let (x, y) = (i as f64 / 200.0, j as f64 / 200.0);
                if x.abs() + y.abs() <= c {
                    assert!(best <= b.value(x, y) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_component_is_an_error() {
        let data = Dataset::new(
            Matrix::from_vec(3, 1, vec![0.1, 0.5, 0.9]),
            Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        let resp = Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let init = crate::model::SgameParams::zeros(1, 1, bounds().with_k(2)).experts;
        let err = m_step_experts(&resp, &data, &init, 0.0, &bounds(), &FitConfig::default()).unwrap_err();
        assert!(matches!(err, SgameError::EmptyComponent { component: 1, .. }));
    }
}
