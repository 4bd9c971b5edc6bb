use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_at_least, stream_rng, LemmaReport};
use crate::bounds::tail_bound;
use crate::dataset::Dataset;
use crate::divergence::{entropy_constants, expected_log_density_at, gaussian_product_constant, trapezoid, KlMethod};
use crate::error::{Result, SgameError};
use crate::estimator::{fit_lasso, lambda_max, FitConfig};
use crate::linalg::{from_eigen, symmetric_eigen, Cholesky, Matrix};
use crate::model::{gradient_envelope, ParameterBounds, PreparedModel, SgameParams};
use crate::scalar::ln_2pi;

/// Allowed absolute gap between quadrature and the closed form.
pub const PRODUCT_TOLERANCE: f64 = 1e-6;
/// Allowed eigenvalue-inequality slack.
pub const WEYL_TOLERANCE: f64 = 1e-10;
/// Allowed increase between consecutive objective values.
pub const EM_SLACK: f64 = 1e-8;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random orthonormal eigenvectors with log-uniform eigenvalues spread a
/// factor 2 beyond the caps on both sides; callers clip as needed.
pub fn random_covariance<R: Rng + ?Sized>(q: usize, lo: f64, hi: f64, rng: &mut R) -> Matrix<f64> {
    let mut g = Matrix::zeros(q, q);
    for i in 0..q {
        for j in 0..=i {
            let v = normal(rng);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let (_, vectors) = symmetric_eigen(&g);
    let (a, b) = ((0.5 * lo).ln(), (2.0 * hi).ln());
    let values: Vec<f64> = (0..q).map(|_| (a + (b - a) * rng.random::<f64>()).exp()).collect();
    from_eigen(&values, &vectors)
}

fn random_row<R: Rng + ?Sized>(len: usize, cap: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    // target l1 norm up to 1.5 cap; rows beyond the cap get projected
    let scale = if l1 > 0.0 { 1.5 * cap * rng.random::<f64>() / l1 } else { 0.0 };
    v.into_iter().map(|x| x * scale).collect()
}

/// A random member of the bounded class: rows drawn inside and beyond the
/// caps, then mapped in by [`SgameParams::project_to_bounds`].
pub fn random_params<R: Rng + ?Sized>(p: usize, q: usize, bounds: &ParameterBounds<f64>, rng: &mut R) -> SgameParams<f64> {
    let mut psi = SgameParams::zeros(p, q, *bounds);
    for k in 0..bounds.k {
        let row = random_row(p + 1, bounds.a_gamma_sup, rng);
        psi.gating.intercepts[k] = row[0];
        psi.gating.slopes.row_mut(k).copy_from_slice(&row[1..]);
        for z in 0..q {
            let row = random_row(p + 1, bounds.a_beta_sup, rng);
            psi.experts.intercepts[(k, z)] = row[0];
            psi.experts.slopes[k].row_mut(z).copy_from_slice(&row[1..]);
        }
        psi.experts.covariances[k] = random_covariance(q, bounds.sigma_eig_min(), bounds.sigma_eig_max(), rng);
    }
    psi.project_to_bounds()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// ‖∇_ψ ln s_ψ(y|x)‖∞ ≤ G(‖y‖∞) on random in-class (ψ, x, y), with y
/// uniform on the cube of half-width A_β + 5·√(1/a_Σ).
pub fn verify_gradient_envelope(
    bounds: &ParameterBounds<f64>,
    q: usize,
    k: usize,
    p: usize,
    trials: usize,
    seed: u64,
) -> Result<LemmaReport> {
    check_at_least("gradient trials", trials, 100)?;
    let bounds = bounds.with_k(k);
    bounds.validate()?;
    let y_max = bounds.a_beta_sup + 5.0 * bounds.sigma_eig_max().sqrt();
    let outcomes: Vec<(f64, serde_json::Value)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let psi = random_params(p, q, &bounds, &mut rng);
            let x: Vec<f64> = (0..p).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..q).map(|_| y_max * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let grad = PreparedModel::new(&psi)?.gradient(&x, &y)?;
            let g = sup_norm(&grad);
            let env = gradient_envelope(sup_norm(&y), &bounds, q, k);
            Ok((g / env, json!({ "trial": t, "psi": psi, "x": x, "y": y, "gradient_sup": g, "envelope": env })))
        })
        .collect::<Result<_>>()?;
    let violations = outcomes.iter().filter(|(r, _)| *r > 1.0).count();
    let witness = outcomes
        .iter()
        .find(|(r, _)| *r > 1.0)
        .or_else(|| outcomes.iter().max_by(|a, b| a.0.total_cmp(&b.0)))
        .map(|o| o.1.clone());
    let max_ratio = outcomes.iter().map(|o| o.0).fold(0.0, f64::max);
    // ratio along the ray y = s·(1, …, 1) for the first trial's ψ and x
    let mut rng = stream_rng(seed, 0);
    let psi = random_params(p, q, &bounds, &mut rng);
    let x: Vec<f64> = (0..p).map(|_| rng.random()).collect();
    let model = PreparedModel::new(&psi)?;
    let ray: Vec<(f64, f64)> = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
        .iter()
        .map(|&s| {
            let y = vec![s; q];
            let g = sup_norm(&model.gradient(&x, &y)?);
            Ok((s, g / gradient_envelope(s, &bounds, q, k)))
        })
        .collect::<Result<_>>()?;
    Ok(LemmaReport {
        suite: "gradient_envelope".into(),
        trials,
        violations,
        worst_case: max_ratio,
        witness,
        details: json!({ "q": q, "k": k, "p": p, "y_max": y_max, "max_ratio": max_ratio, "ray_ratios": ray }),
    })
}

/// Monte Carlo P(max_i ‖Y_i‖∞ > M_n) under ψ against the printed tail bound.
/// Holds when the estimate minus three standard errors is at most the bound.
pub fn verify_tail_bound(psi: &SgameParams<f64>, design: &Matrix<f64>, m_n: f64, mc_reps: usize, seed: u64) -> Result<LemmaReport> {
    check_at_least("tail Monte Carlo replications", mc_reps, 10_000)?;
    if design.cols() != psi.p() {
        return Err(SgameError::dim("design columns", psi.p(), design.cols()));
    }
    let model = PreparedModel::new(psi)?;
    let n = design.rows();
    let hits = (0..mc_reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            for i in 0..n {
                let y = model.sample(design.row(i), &mut rng)?;
                if sup_norm(&y) > m_n {
                    return Ok(1usize);
                }
            }
            Ok(0)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    let est = hits as f64 / mc_reps as f64;
    let se = (est * (1.0 - est) / mc_reps as f64).sqrt();
    let bound = tail_bound(m_n, n, psi.k(), psi.q(), &psi.bounds);
    let margin = est - 3.0 * se - bound;
    let holds = margin <= 0.0;
    Ok(LemmaReport {
        suite: "tail_bound".into(),
        trials: mc_reps,
        violations: usize::from(!holds),
        worst_case: margin,
        witness: Some(json!({ "n": n, "m_n": m_n, "estimate": est, "std_error": se, "bound": bound })),
        details: json!({ "estimate": est, "std_error": se, "bound": bound, "holds": holds, "m_n": m_n, "n": n }),
    })
}

/// ∫ ln(s₀) s₀ dy ≤ ln C_{s₀} at every design row, by Monte Carlo with
/// three standard errors of slack.
pub fn verify_entropy_bound(psi0: &SgameParams<f64>, design: &Matrix<f64>, mc_reps: usize, seed: u64) -> Result<LemmaReport> {
    check_at_least("entropy Monte Carlo replications", mc_reps, 10_000)?;
    if design.cols() != psi0.p() {
        return Err(SgameError::dim("design columns", psi0.p(), design.cols()));
    }
    let (c, h) = entropy_constants(&psi0.bounds, psi0.q());
    let ln_c = c.ln();
    let method = KlMethod::MonteCarlo { samples: mc_reps, seed };
    let rows: Vec<(f64, f64)> = (0..design.rows())
        .into_par_iter()
        .map(|i| {
            let e = expected_log_density_at(psi0, design.row(i), method, i as u64)?;
            Ok((e.value, e.std_error))
        })
        .collect::<Result<_>>()?;
    let margins: Vec<f64> = rows.iter().map(|(v, se)| v - 3.0 * se - ln_c).collect();
    let violations = margins.iter().filter(|&&m| m > 0.0).count();
    let worst = (0..rows.len()).max_by(|&a, &b| margins[a].total_cmp(&margins[b])).unwrap_or(0);
    let mean = rows.iter().map(|r| r.0).sum::<f64>() / rows.len().max(1) as f64;
    Ok(LemmaReport {
        suite: "entropy_bound".into(),
        trials: rows.len(),
        violations,
        worst_case: margins[worst],
        witness: Some(json!({
            "row": worst,
            "x": design.row(worst),
            "estimate": rows[worst].0,
            "std_error": rows[worst].1,
            "ln_c": ln_c,
        })),
        details: json!({ "ln_c": ln_c, "h": h, "mean_estimate": mean }),
    })
}

fn log_gaussian(chol: &Cholesky<f64>, mean: &[f64], y: &[f64]) -> f64 {
    let d: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    -0.5 * (mean.len() as f64 * ln_2pi::<f64>() + chol.log_det() + chol.mahalanobis_sq(&d))
}

/// ∫ φ(y; a, A)·φ(y; b, B) dy by the (tensor) trapezoid rule with `nodes`
/// points per axis, q ∈ {1, 2}.
pub fn product_integral(a: &[f64], big_a: &Matrix<f64>, b: &[f64], big_b: &Matrix<f64>, nodes: usize) -> Result<f64> {
    let q = a.len();
    if !(1..=2).contains(&q) {
        return Err(SgameError::QuadratureDimension(q));
    }
    let ca = Cholesky::new(big_a).ok_or(SgameError::NotSpd("A"))?;
    let cb = Cholesky::new(big_b).ok_or(SgameError::NotSpd("B"))?;
    let range = |z: usize| {
        let c = 0.5 * (a[z] + b[z]);
        let sd = big_a[(z, z)].max(big_b[(z, z)]).sqrt();
        let half = 0.5 * (a[z] - b[z]).abs() + 12.0 * sd;
        (c - half, c + half)
    };
    let f = |y: &[f64]| (log_gaussian(&ca, a, y) + log_gaussian(&cb, b, y)).exp();
    let (lo0, hi0) = range(0);
    if q == 1 {
        return Ok(trapezoid(lo0, hi0, nodes, |t| f(&[t])));
    }
    let (lo1, hi1) = range(1);
    Ok(trapezoid(lo0, hi0, nodes, |s| trapezoid(lo1, hi1, nodes, |t| f(&[s, t]))))
}

/// Nodes per axis used by [`verify_product_constant`].
pub const PRODUCT_NODES: usize = 401;

/// Closed-form ∫φ·φ against quadrature at q = 1 and q = 2 (alternating), and
/// the bound by (4π)^{−q/2}A_Σ^{q/2} for covariances within the caps.
pub fn verify_product_constant(trials: usize, seed: u64) -> Result<LemmaReport> {
    check_at_least("product trials", trials, 50)?;
    let caps = super::default_bounds(1);
    let outcomes: Vec<(f64, bool, serde_json::Value)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let q = 1 + t % 2;
            let mean = |rng: &mut rand_chacha::ChaCha8Rng| (0..q).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect::<Vec<_>>();
            let (a, b) = (mean(&mut rng), mean(&mut rng));
            let (lo, hi) = (caps.sigma_eig_min(), caps.sigma_eig_max());
            let clip = |m: Matrix<f64>| crate::linalg::clip_spectrum(&m, lo, hi, 0.0).unwrap_or(m);
            let big_a = clip(random_covariance(q, lo, hi, &mut rng));
            let big_b = clip(random_covariance(q, lo, hi, &mut rng));
            let formula = gaussian_product_constant(&a, &big_a, &b, &big_b)?;
            let numeric = product_integral(&a, &big_a, &b, &big_b, PRODUCT_NODES)?;
            let (c, _) = entropy_constants(&caps, q);
            let dominated = formula <= c * (1.0 + 1e-12);
            Ok((
                (formula - numeric).abs(),
                dominated,
                json!({ "trial": t, "q": q, "a": a, "A": big_a, "b": b, "B": big_b, "formula": formula, "quadrature": numeric, "c_s0": c }),
            ))
        })
        .collect::<Result<_>>()?;
    let bad = |o: &(f64, bool, serde_json::Value)| o.0 > PRODUCT_TOLERANCE || !o.1;
    let violations = outcomes.iter().filter(|o| bad(o)).count();
    let max_err = outcomes.iter().map(|o| o.0).fold(0.0, f64::max);
    let witness = outcomes
        .iter()
        .find(|o| bad(o))
        .or_else(|| outcomes.iter().max_by(|a, b| a.0.total_cmp(&b.0)))
        .map(|o| o.2.clone());
    Ok(LemmaReport {
        suite: "product_constant".into(),
        trials,
        violations,
        worst_case: max_err,
        witness,
        details: json!({
            "max_abs_error": max_err,
            "domination_violations": outcomes.iter().filter(|o| !o.1).count(),
            "nodes": PRODUCT_NODES,
        }),
    })
}

fn extreme_eigenvalues(m: &Matrix<f64>) -> (f64, f64) {
    let d = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let e = nalgebra::SymmetricEigen::new(d).eigenvalues;
    (e.min(), e.max())
}

/// m(A+B) ≥ m(A)+m(B) and M(A+B) ≤ M(A)+M(B) for random symmetric q×q pairs.
pub fn verify_weyl(trials: usize, q: usize, seed: u64) -> Result<LemmaReport> {
    check_at_least("Weyl trials", trials, 100)?;
    check_at_least("Weyl dimension q", q, 1)?;
    let sym = |rng: &mut rand_chacha::ChaCha8Rng| {
        let scale = (6.0 * rng.random::<f64>() - 3.0).exp();
        let mut m = Matrix::zeros(q, q);
        for i in 0..q {
            for j in 0..=i {
                let v = scale * normal(rng);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    };
    let outcomes: Vec<(f64, serde_json::Value)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let a = sym(&mut rng);
            let b = sym(&mut rng);
            let (ma, big_ma) = extreme_eigenvalues(&a);
            let (mb, big_mb) = extreme_eigenvalues(&b);
            let (ms, big_ms) = extreme_eigenvalues(&a.add(&b));
            let gap = (ma + mb - ms).max(big_ms - big_ma - big_mb);
            (gap, json!({ "trial": t, "a": a, "b": b }))
        })
        .collect();
    let violations = outcomes.iter().filter(|o| o.0 > WEYL_TOLERANCE).count();
    let worst = outcomes.iter().max_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
    let witness = outcomes.iter().find(|o| o.0 > WEYL_TOLERANCE).unwrap_or(worst);
    Ok(LemmaReport {
        suite: "weyl".into(),
        trials,
        violations,
        worst_case: worst.0,
        witness: Some(witness.1.clone()),
        details: json!({ "q": q, "tolerance": WEYL_TOLERANCE }),
    })
}

/// Penalty level of one EM-monotonicity fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmLambda {
    Value(f64),
    /// Fraction of the dataset's single-expert λ_max.
    MaxFraction(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmCase {
    pub k: usize,
    pub lambda: EmLambda,
}

/// Every fit_lasso trace over datasets × cases is nonincreasing within [`EM_SLACK`].
pub fn verify_em_monotonicity(
    datasets: &[Dataset<f64>],
    cases: &[EmCase],
    bounds: &ParameterBounds<f64>,
    cfg: &FitConfig,
) -> Result<LemmaReport> {
    if datasets.is_empty() || cases.is_empty() {
        return Err(SgameError::InvalidConfig("EM monotonicity needs at least one dataset and one case".into()));
    }
    let jobs: Vec<(usize, EmCase)> = (0..datasets.len()).flat_map(|d| cases.iter().map(move |&c| (d, c))).collect();
    let fits: Vec<serde_json::Value> = jobs
        .par_iter()
        .map(|&(d, case)| {
            let data = &datasets[d];
            let lambda = match case.lambda {
                EmLambda::Value(v) => v,
                EmLambda::MaxFraction(f) => f * lambda_max(data, bounds)?,
            };
            let fit = fit_lasso(data, case.k, lambda, bounds, cfg)?;
            let increase = fit
                .penalized_nll_trace
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(json!({
                "dataset": d,
                "k": case.k,
                "lambda": lambda,
                "trace_len": fit.penalized_nll_trace.len(),
                "max_increase": increase,
                "active": fit.active_count(),
                "converged": fit.converged,
                "final": fit.final_penalized_nll,
            }))
        })
        .collect::<Result<_>>()?;
    let inc = |v: &serde_json::Value| v["max_increase"].as_f64().unwrap_or(f64::NEG_INFINITY);
    let violations = fits.iter().filter(|v| inc(v) > EM_SLACK).count();
    let worst = fits.iter().max_by(|a, b| inc(a).total_cmp(&inc(b))).cloned();
    Ok(LemmaReport {
        suite: "em_monotonicity".into(),
        trials: fits.len(),
        violations,
        worst_case: worst.as_ref().map_or(f64::NEG_INFINITY, inc),
        witness: worst,
        details: serde_json::Value::Array(fits),
    })
}
