use serde::{Deserialize, Serialize};

use crate::error::{Result, SgameError};
use crate::linalg::{clip_spectrum, symmetric_eigen, Matrix};
use crate::scalar::Scalar;

/// Box constants defining the bounded parameter class.
///
/// All inequalities are treated as non-strict.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterBounds<T> {
    /// A_γ: cap on |γ_k0| + sup_x |γ_kᵀx|.
    pub a_gamma_sup: T,
    /// A_β: cap on each expert mean coordinate over x ∈ [0,1]^p.
    pub a_beta_sup: T,
    /// a_Σ: lower cap on the eigenvalues of Σ⁻¹.
    pub a_sigma_min: T,
    /// A_Σ: upper cap on the eigenvalues of Σ⁻¹.
    pub a_sigma_max: T,
    /// Number of experts K.
    pub k: usize,
}

impl<T: Scalar> ParameterBounds<T> {
    pub fn new(a_gamma_sup: T, a_beta_sup: T, a_sigma_min: T, a_sigma_max: T, k: usize) -> Result<Self> {
        let b = ParameterBounds {
            a_gamma_sup,
            a_beta_sup,
            a_sigma_min,
            a_sigma_max,
            k,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.a_gamma_sup, self.a_beta_sup, self.a_sigma_min, self.a_sigma_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(SgameError::InvalidBounds("all caps must be finite".into()));
        }
        if self.a_gamma_sup < T::zero() || self.a_beta_sup < T::zero() {
            return Err(SgameError::InvalidBounds(format!(
                "A_gamma = {} and A_beta = {} must be nonnegative",
                self.a_gamma_sup, self.a_beta_sup
            )));
        }
        if !(self.a_sigma_min > T::zero()) || self.a_sigma_min > self.a_sigma_max {
            return Err(SgameError::InvalidBounds(format!(
                "need 0 < a_Sigma ({}) <= A_Sigma ({})",
                self.a_sigma_min, self.a_sigma_max
            )));
        }
        if self.k == 0 {
            return Err(SgameError::InvalidBounds("K must be at least 1".into()));
        }
        Ok(())
    }

    fn k_t(&self) -> T {
        T::from_usize_lossy(self.k)
    }

    /// a_G = e^{−2A_γ}/K.
    pub fn a_g_min(&self) -> T {
        (-T::lit(2.0) * self.a_gamma_sup).exp() / self.k_t()
    }

    /// A_G = e^{2A_γ}/K.
    pub fn a_g_max(&self) -> T {
        (T::lit(2.0) * self.a_gamma_sup).exp() / self.k_t()
    }

    /// Smallest admissible covariance eigenvalue, 1/A_Σ.
    pub fn sigma_eig_min(&self) -> T {
        T::one() / self.a_sigma_max
    }

    /// Largest admissible covariance eigenvalue, 1/a_Σ.
    pub fn sigma_eig_max(&self) -> T {
        T::one() / self.a_sigma_min
    }

    /// Same caps with a different number of experts.
    pub fn with_k(&self, k: usize) -> Self {
        ParameterBounds { k, ..*self }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterBounds<U> {
        ParameterBounds {
            a_gamma_sup: U::lit(self.a_gamma_sup.as_f64()),
            a_beta_sup: U::lit(self.a_beta_sup.as_f64()),
            a_sigma_min: U::lit(self.a_sigma_min.as_f64()),
            a_sigma_max: U::lit(self.a_sigma_max.as_f64()),
            k: self.k,
        }
    }
}

/// Soft-max gating coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct GatingParams<T> {
    /// γ_k0, length K.
    pub intercepts: Vec<T>,
    /// γ_k as rows of a K×p matrix.
    pub slopes: Matrix<T>,
}

/// Gaussian expert coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct ExpertParams<T> {
    /// β_k0 as rows of a K×q matrix.
    pub intercepts: Matrix<T>,
    /// β_k, one q×p matrix per expert.
    pub slopes: Vec<Matrix<T>>,
    /// Σ_k, one q×q matrix per expert.
    pub covariances: Vec<Matrix<T>>,
}

/// The full parameter ψ = (γ, β, Σ) together with the class it is meant to live in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct SgameParams<T> {
    pub gating: GatingParams<T>,
    pub experts: ExpertParams<T>,
    pub bounds: ParameterBounds<T>,
}

/// sup over x ∈ [0,1]^p of |b| + |wᵀx|, i.e. |b| + max(Σ w⁺, Σ w⁻).
pub fn affine_sup<T: Scalar>(intercept: T, w: &[T]) -> T {
    let pos: T = w.iter().map(|&v| v.max(T::zero())).sum();
    let neg: T = w.iter().map(|&v| (-v).max(T::zero())).sum();
    intercept.abs() + pos.max(neg)
}

/// |b| + ‖w‖₁, the row-wise surrogate used when projecting.
fn affine_l1<T: Scalar>(intercept: T, w: &[T]) -> T {
    intercept.abs() + w.iter().map(|v| v.abs()).sum::<T>()
}

fn within<T: Scalar>(value: T, cap: T) -> bool {
    value <= cap + T::feasibility_tol() * cap.max(T::one())
}

/// Flat offsets of the gradient / parameter vector.
///
/// Order: γ intercepts (K), γ slopes (K×p row-major), β intercepts (K×q),
/// β slopes (k, z, j), Σ entries (k, a, b).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlatLayout {
    pub k: usize,
    pub p: usize,
    pub q: usize,
}

impl FlatLayout {
    pub fn new(k: usize, p: usize, q: usize) -> Self {
        FlatLayout { k, p, q }
    }

    pub fn gamma_intercept(&self, k: usize) -> usize {
        k
    }

    pub fn gamma_slope(&self, k: usize, j: usize) -> usize {
        self.k + k * self.p + j
    }

    pub fn beta_intercept(&self, k: usize, z: usize) -> usize {
        self.k * (1 + self.p) + k * self.q + z
    }

    pub fn beta_slope(&self, k: usize, z: usize, j: usize) -> usize {
        self.k * (1 + self.p + self.q) + (k * self.q + z) * self.p + j
    }

    pub fn sigma(&self, k: usize, a: usize, b: usize) -> usize {
        self.k * (1 + self.p + self.q + self.q * self.p) + (k * self.q + a) * self.q + b
    }

    pub fn len(&self) -> usize {
        self.k * (1 + self.p + self.q + self.q * self.p + self.q * self.q)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Range holding the γ block (intercepts and slopes).
    pub fn gamma_range(&self) -> std::ops::Range<usize> {
        0..self.k * (1 + self.p)
    }
}

impl<T: Scalar> SgameParams<T> {
    /// All coefficients zero and every Σ_k = I, clipped into range.
    pub fn zeros(p: usize, q: usize, bounds: ParameterBounds<T>) -> Self {
        let k = bounds.k;
        let unit = T::one().max(bounds.sigma_eig_min()).min(bounds.sigma_eig_max());
        SgameParams {
            gating: GatingParams {
                intercepts: vec![T::zero(); k],
                slopes: Matrix::zeros(k, p),
            },
            experts: ExpertParams {
                intercepts: Matrix::zeros(k, q),
                slopes: vec![Matrix::zeros(q, p); k],
                covariances: vec![Matrix::identity(q).scaled(unit); k],
            },
            bounds,
        }
    }

    pub fn k(&self) -> usize {
        self.gating.intercepts.len()
    }

    pub fn p(&self) -> usize {
        self.gating.slopes.cols()
    }

    pub fn q(&self) -> usize {
        self.experts.intercepts.cols()
    }

    pub fn layout(&self) -> FlatLayout {
        FlatLayout::new(self.k(), self.p(), self.q())
    }

    /// Checks shapes, finiteness, symmetry and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let (k, p, q) = (self.k(), self.p(), self.q());
        if k != self.bounds.k {
            return Err(SgameError::dim("gating intercepts (K)", self.bounds.k, k));
        }
        if self.gating.slopes.rows() != k {
            return Err(SgameError::dim("gating slope rows", k, self.gating.slopes.rows()));
        }
        if self.experts.intercepts.rows() != k {
            return Err(SgameError::dim("expert intercept rows", k, self.experts.intercepts.rows()));
        }
        if q == 0 {
            return Err(SgameError::dim("response dimension q (at least)", 1, 0));
        }
        if self.experts.slopes.len() != k {
            return Err(SgameError::dim("expert slope matrices", k, self.experts.slopes.len()));
        }
        if self.experts.covariances.len() != k {
            return Err(SgameError::dim("expert covariances", k, self.experts.covariances.len()));
        }
        for (i, b) in self.experts.slopes.iter().enumerate() {
            if b.rows() != q || b.cols() != p {
                return Err(SgameError::dim(format!("expert {i} slope size q*p"), q * p, b.rows() * b.cols()));
            }
        }
        let finite = self.gating.intercepts.iter().all(|v| v.is_finite())
            && self.gating.slopes.all_finite()
            && self.experts.intercepts.all_finite()
            && self.experts.slopes.iter().all(Matrix::all_finite);
        if !finite {
            return Err(SgameError::NonFinite("mean or gating coefficient".into()));
        }
        for (i, s) in self.experts.covariances.iter().enumerate() {
            if s.rows() != q || s.cols() != q {
                return Err(SgameError::dim(format!("covariance {i} size q*q"), q * q, s.rows() * s.cols()));
            }
            if !s.all_finite() || !s.is_symmetric(T::lit(1e3) * T::epsilon()) {
                return Err(SgameError::NotPositiveDefinite { component: i });
            }
            if crate::linalg::Cholesky::new(s).is_none() {
                return Err(SgameError::NotPositiveDefinite { component: i });
            }
        }
        Ok(())
    }

    /// Checks membership in the bounded class using the exact sup over
    /// x ∈ [0,1]^p; the error names the first violated constraint.
    pub fn check_bounds(&self) -> Result<()> {
        self.validate()?;
        let b = &self.bounds;
        for k in 0..self.k() {
            let s = affine_sup(self.gating.intercepts[k], self.gating.slopes.row(k));
            if !within(s, b.a_gamma_sup) {
                return Err(SgameError::BoundViolation(format!(
                    "gating component {k}: |gamma_k0| + sup_x |gamma_k^T x| = {s} exceeds A_gamma = {}",
                    b.a_gamma_sup
                )));
            }
            for z in 0..self.q() {
                let s = affine_sup(self.experts.intercepts[(k, z)], self.experts.slopes[k].row(z));
                if !within(s, b.a_beta_sup) {
                    return Err(SgameError::BoundViolation(format!(
                        "expert {k}, output {z}: |beta_k0| + sup_x |beta_k x| = {s} exceeds A_beta = {}",
                        b.a_beta_sup
                    )));
                }
            }
            let (eig, _) = symmetric_eigen(&self.experts.covariances[k]);
            let (lo, hi) = (eig[0], eig[eig.len() - 1]);
            let tol = T::feasibility_tol();
            if lo < b.sigma_eig_min() * (T::one() - tol) || hi > b.sigma_eig_max() * (T::one() + tol) {
                return Err(SgameError::BoundViolation(format!(
                    "expert {k}: covariance eigenvalues [{lo}, {hi}] leave [1/A_Sigma, 1/a_Sigma] = [{}, {}]",
                    b.sigma_eig_min(),
                    b.sigma_eig_max()
                )));
            }
        }
        Ok(())
    }

    pub fn is_feasible(&self) -> bool {
        self.check_bounds().is_ok()
    }

    /// Maps a finite ψ into the bounded class. Rows that already satisfy
    /// their constraint are left untouched, so the map is idempotent and
    /// the identity on feasible input; offending rows are scaled until
    /// |b| + ‖w‖₁ meets the cap, and covariance spectra are clipped.
    pub fn project_to_bounds(&self) -> Self {
        let mut out = self.clone();
        let b = self.bounds;
        for k in 0..out.k() {
            let g0 = out.gating.intercepts[k];
            if !within(affine_sup(g0, out.gating.slopes.row(k)), b.a_gamma_sup) {
                let f = b.a_gamma_sup / affine_l1(g0, out.gating.slopes.row(k));
                out.gating.intercepts[k] = g0 * f;
                out.gating.slopes.row_mut(k).iter_mut().for_each(|v| *v = *v * f);
            }
            for z in 0..out.q() {
                let b0 = out.experts.intercepts[(k, z)];
                let row = out.experts.slopes[k].row(z);
                if !within(affine_sup(b0, row), b.a_beta_sup) {
                    let f = b.a_beta_sup / affine_l1(b0, row);
                    out.experts.intercepts[(k, z)] = b0 * f;
                    out.experts.slopes[k].row_mut(z).iter_mut().for_each(|v| *v = *v * f);
                }
            }
            let tol = T::feasibility_tol();
            if let Some(c) = clip_spectrum(
                &out.experts.covariances[k],
                b.sigma_eig_min(),
                b.sigma_eig_max(),
                tol,
            ) {
                out.experts.covariances[k] = c;
            }
        }
        out
    }

    /// ‖ψ^{[1,2]}‖₁: gating slopes plus expert slopes.
    pub fn penalized_l1(&self) -> T {
        let g: T = self.gating.slopes.as_slice().iter().map(|v| v.abs()).sum();
        let e: T = self
            .experts
            .slopes
            .iter()
            .flat_map(|m| m.as_slice())
            .map(|v| v.abs())
            .sum();
        g + e
    }

    /// λ‖ψ^{[1,2]}‖₁; intercepts and covariances are not penalized.
    pub fn penalty(&self, lambda: T) -> Result<T> {
        if lambda < T::zero() || lambda.is_nan() {
            return Err(SgameError::NegativeLambda(lambda.as_f64()));
        }
        Ok(lambda * self.penalized_l1())
    }

    /// Concatenated penalized coordinates: γ slopes then β slopes.
    pub fn penalized_coords(&self) -> Vec<T> {
        let mut v = self.gating.slopes.as_slice().to_vec();
        for m in &self.experts.slopes {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    /// Inverse of [`Self::penalized_coords`]. Panics on length mismatch.
    pub fn set_penalized_coords(&mut self, v: &[T]) {
        let kp = self.gating.slopes.as_slice().len();
        let qp = self.q() * self.p();
        assert_eq!(v.len(), kp + self.k() * qp, "penalized coordinate length");
        self.gating.slopes.as_mut_slice().copy_from_slice(&v[..kp]);
        for (k, m) in self.experts.slopes.iter_mut().enumerate() {
            m.as_mut_slice().copy_from_slice(&v[kp + k * qp..kp + (k + 1) * qp]);
        }
    }

    /// Flattens ψ in [`FlatLayout`] order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = self.gating.intercepts.clone();
        v.extend_from_slice(self.gating.slopes.as_slice());
        v.extend_from_slice(self.experts.intercepts.as_slice());
        for m in &self.experts.slopes {
            v.extend_from_slice(m.as_slice());
        }
        for m in &self.experts.covariances {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    /// Overwrites ψ from a [`FlatLayout`]-ordered vector. No validation.
    pub fn set_flat(&mut self, v: &[T]) {
        let layout = self.layout();
        assert_eq!(v.len(), layout.len(), "flat parameter length");
        let (k, p, q) = (layout.k, layout.p, layout.q);
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &v[at..at + n];
            at += n;
            s
        };
        self.gating.intercepts.copy_from_slice(take(k));
        self.gating.slopes.as_mut_slice().copy_from_slice(take(k * p));
        self.experts.intercepts.as_mut_slice().copy_from_slice(take(k * q));
        for m in self.experts.slopes.iter_mut() {
            m.as_mut_slice().copy_from_slice(take(q * p));
        }
        for m in self.experts.covariances.iter_mut() {
            m.as_mut_slice().copy_from_slice(take(q * q));
        }
    }

    /// Changes precision, e.g. to evaluate an f64 fit in f32.
    pub fn cast<U: Scalar>(&self) -> SgameParams<U> {
        let c = |v: T| U::lit(v.as_f64());
        SgameParams {
            gating: GatingParams {
                intercepts: self.gating.intercepts.iter().map(|&v| c(v)).collect(),
                slopes: self.gating.slopes.map(c),
            },
            experts: ExpertParams {
                intercepts: self.experts.intercepts.map(c),
                slopes: self.experts.slopes.iter().map(|m| m.map(c)).collect(),
                covariances: self.experts.covariances.iter().map(|m| m.map(c)).collect(),
            },
            bounds: self.bounds.cast(),
        }
    }
}
