use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{GatingParams, ParameterBounds, SgameParams};
use crate::error::{Result, SgameError};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::{ln_2pi, log_sum_exp, Scalar};

fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(SgameError::dim(what, expected, found))
    }
}

fn gate_scores<T: Scalar>(gating: &GatingParams<T>, x: &[T]) -> Vec<T> {
    (0..gating.intercepts.len())
        .map(|k| {
            gating.intercepts[k]
                + gating
                    .slopes
                    .row(k)
                    .iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (&g, &xj)| acc + g * xj)
        })
        .collect()
}

/// ln g_k(x; γ) for every k.
pub fn log_softmax_gates<T: Scalar>(gating: &GatingParams<T>, x: &[T]) -> Result<Vec<T>> {
    check_len("covariate vector", gating.slopes.cols(), x.len())?;
    let w = gate_scores(gating, x);
    let lse = log_sum_exp(&w);
    Ok(w.into_iter().map(|v| v - lse).collect())
}

/// g_k(x; γ) = exp(w_k) / Σ_l exp(w_l), computed with a max shift.
pub fn softmax_gates<T: Scalar>(gating: &GatingParams<T>, x: &[T]) -> Result<Vec<T>> {
    check_len("covariate vector", gating.slopes.cols(), x.len())?;
    let w = gate_scores(gating, x);
    let max = w.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = w.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// ψ with every Σ_k factorized once, for repeated evaluation.
#[derive(Clone, Debug)]
pub struct PreparedModel<'a, T> {
    params: &'a SgameParams<T>,
    chol: Vec<Cholesky<T>>,
    log_norm: Vec<T>,
}

impl<'a, T: Scalar> PreparedModel<'a, T> {
    pub fn new(params: &'a SgameParams<T>) -> Result<Self> {
        params.validate()?;
        let q = T::from_usize_lossy(params.q());
        let mut chol = Vec::with_capacity(params.k());
        let mut log_norm = Vec::with_capacity(params.k());
        for (k, s) in params.experts.covariances.iter().enumerate() {
            let c = Cholesky::new(s).ok_or(SgameError::NotPositiveDefinite { component: k })?;
            log_norm.push(-T::lit(0.5) * (q * ln_2pi::<T>() + c.log_det()));
            chol.push(c);
        }
        Ok(PreparedModel {
            params,
            chol,
            log_norm,
        })
    }

    pub fn params(&self) -> &SgameParams<T> {
        self.params
    }

    pub fn cholesky(&self, k: usize) -> &Cholesky<T> {
        &self.chol[k]
    }

    fn check_x(&self, x: &[T]) -> Result<()> {
        check_len("covariate vector", self.params.p(), x.len())
    }

    fn check_y(&self, y: &[T]) -> Result<()> {
        check_len("response vector", self.params.q(), y.len())
    }

    /// m_k(x) = β_k0 + β_k x.
    pub fn mean(&self, k: usize, x: &[T]) -> Vec<T> {
        let e = &self.params.experts;
        let bx = e.slopes[k].matvec(x);
        e.intercepts.row(k).iter().zip(bx).map(|(&a, b)| a + b).collect()
    }

    /// ln φ(y; m, Σ_k).
    pub fn log_gaussian(&self, k: usize, mean: &[T], y: &[T]) -> T {
        let r: Vec<T> = y.iter().zip(mean).map(|(&a, &b)| a - b).collect();
        self.log_norm[k] - T::lit(0.5) * self.chol[k].mahalanobis_sq(&r)
    }

    /// ln g_k(x) + ln φ(y; m_k(x), Σ_k) for every k.
    pub fn component_log_terms(&self, x: &[T], y: &[T]) -> Result<Vec<T>> {
        self.check_y(y)?;
        let lg = log_softmax_gates(&self.params.gating, x)?;
        Ok((0..self.params.k())
            .map(|k| lg[k] + self.log_gaussian(k, &self.mean(k, x), y))
            .collect())
    }

    pub fn log_density(&self, x: &[T], y: &[T]) -> Result<T> {
        Ok(log_sum_exp(&self.component_log_terms(x, y)?))
    }

    /// Posterior component probabilities r_k ∝ g_k φ_k.
    pub fn responsibilities(&self, x: &[T], y: &[T]) -> Result<Vec<T>> {
        let t = self.component_log_terms(x, y)?;
        let lse = log_sum_exp(&t);
        Ok(t.into_iter().map(|v| (v - lse).exp()).collect())
    }

    /// Draws (component, y) given x.
    pub fn sample_with_component<R: Rng + ?Sized>(&self, x: &[T], rng: &mut R) -> Result<(usize, Vec<T>)> {
        self.check_x(x)?;
        let g = softmax_gates(&self.params.gating, x)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = g.len() - 1;
        for (k, gk) in g.iter().enumerate() {
            acc += gk.as_f64();
            if u < acc {
                comp = k;
                break;
            }
        }
        let q = self.params.q();
        let z: Vec<T> = (0..q)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::lit(v)
            })
            .collect();
        let l = self.chol[comp].factor();
        let m = self.mean(comp, x);
        let y = (0..q)
            .map(|i| m[i] + (0..=i).fold(T::zero(), |acc, j| acc + l[(i, j)] * z[j]))
            .collect();
        Ok((comp, y))
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[T], rng: &mut R) -> Result<Vec<T>> {
        Ok(self.sample_with_component(x, rng)?.1)
    }

    /// Analytic ∇_ψ ln s_ψ(y|x) in [`super::FlatLayout`] order. Covariance
    /// entries are differentiated as independent coordinates.
    pub fn gradient(&self, x: &[T], y: &[T]) -> Result<Vec<T>> {
        self.check_x(x)?;
        let psi = self.params;
        let layout = psi.layout();
        let (k_n, p, q) = (layout.k, layout.p, layout.q);
        let g = softmax_gates(&psi.gating, x)?;
        let r = self.responsibilities(x, y)?;
        let half = T::lit(0.5);
        let mut grad = vec![T::zero(); layout.len()];
        for l in 0..k_n {
            let d = r[l] - g[l];
            grad[layout.gamma_intercept(l)] = d;
            for j in 0..p {
                grad[layout.gamma_slope(l, j)] = d * x[j];
            }
            let resid: Vec<T> = y.iter().zip(self.mean(l, x)).map(|(&a, b)| a - b).collect();
            let u = self.chol[l].solve(&resid);
            let inv = self.chol[l].inverse();
            for z in 0..q {
                grad[layout.beta_intercept(l, z)] = r[l] * u[z];
                for j in 0..p {
                    grad[layout.beta_slope(l, z, j)] = r[l] * u[z] * x[j];
                }
                for b in 0..q {
                    grad[layout.sigma(l, z, b)] = r[l] * half * (u[z] * u[b] - inv[(z, b)]);
                }
            }
        }
        Ok(grad)
    }
}

/// ln s_ψ(y|x).
pub fn log_density<T: Scalar>(psi: &SgameParams<T>, x: &[T], y: &[T]) -> Result<T> {
    PreparedModel::new(psi)?.log_density(x, y)
}

/// One draw from s_ψ(·|x).
pub fn sample<T: Scalar, R: Rng + ?Sized>(psi: &SgameParams<T>, x: &[T], rng: &mut R) -> Result<Vec<T>> {
    PreparedModel::new(psi)?.sample(x, rng)
}

/// Analytic gradient of ln s_ψ(y|x); see [`PreparedModel::gradient`].
pub fn log_density_gradient<T: Scalar>(psi: &SgameParams<T>, x: &[T], y: &[T]) -> Result<Vec<T>> {
    PreparedModel::new(psi)?.gradient(x, y)
}

/// G(‖y‖∞) = max(A_Σ, 1 + K·A_G)·(1 + q√q·(‖y‖∞ + A_β)²·A_Σ).
pub fn gradient_envelope<T: Scalar>(y_inf_norm: T, bounds: &ParameterBounds<T>, q: usize, k: usize) -> T {
    let qf = T::from_usize_lossy(q);
    let kf = T::from_usize_lossy(k);
    let lead = bounds.a_sigma_max.max(T::one() + kf * bounds.a_g_max());
    let s = y_inf_norm + bounds.a_beta_sup;
    lead * (T::one() + qf * qf.sqrt() * s * s * bounds.a_sigma_max)
}

/// n×K responsibilities for a batch, rows in input order.
pub fn responsibility_matrix<T: Scalar>(model: &PreparedModel<'_, T>, design: &Matrix<T>, responses: &Matrix<T>) -> Result<Matrix<T>> {
    let k = model.params().k();
    let mut out = Matrix::zeros(design.rows(), k);
    for i in 0..design.rows() {
        let r = model.responsibilities(design.row(i), responses.row(i))?;
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}
