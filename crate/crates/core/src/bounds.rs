//! Closed-form constants of the l1-oracle inequality, the l1-ball selection
//! theorem and their supporting lemmas.

use serde::{Deserialize, Serialize};

use crate::divergence::entropy_constants;
use crate::error::{Result, SgameError};
use crate::model::ParameterBounds;
use crate::scalar::Scalar;

/// Smallest κ for which the regularization condition is a theorem.
pub const THEOREM_KAPPA: f64 = 148.0;

/// Sizes, caps and κ for evaluating the regularization condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct BoundInputs<T> {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub bounds: ParameterBounds<T>,
    pub kappa: T,
    /// Truncation level M_n; [`choose_mn`] when absent.
    #[serde(default)]
    pub m_n: Option<T>,
    /// Accept κ < 148; results are then outside the theorem.
    #[serde(default)]
    pub allow_small_kappa: bool,
}

impl<T: Scalar> BoundInputs<T> {
    pub fn new(n: usize, p: usize, q: usize, bounds: ParameterBounds<T>, kappa: T) -> Self {
        BoundInputs {
            n,
            p,
            q,
            k: bounds.k,
            bounds,
            kappa,
            m_n: None,
            allow_small_kappa: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.n < 2 {
            return Err(SgameError::InvalidConfig(format!("need n >= 2 so that ln n > 0, got {}", self.n)));
        }
        if self.p == 0 || self.q == 0 || self.k == 0 {
            return Err(SgameError::InvalidConfig("p, q and K must be positive".into()));
        }
        if self.k != self.bounds.k {
            return Err(SgameError::dim("K in bounds", self.k, self.bounds.k));
        }
        if !(self.kappa > T::zero()) || !self.kappa.is_finite() {
            return Err(SgameError::InvalidConfig(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.kappa < T::lit(THEOREM_KAPPA) && !self.allow_small_kappa {
            return Err(SgameError::InvalidConfig(format!(
                "kappa = {} is below the theorem constant {THEOREM_KAPPA}; set allow_small_kappa (--allow-small-kappa) to evaluate anyway",
                self.kappa
            )));
        }
        if let Some(m) = self.m_n {
            if !(m > T::zero()) {
                return Err(SgameError::InvalidConfig(format!("M_n must be positive, got {m}")));
            }
        }
        Ok(())
    }

    pub fn is_theorem_kappa(&self) -> bool {
        self.kappa >= T::lit(THEOREM_KAPPA)
    }

    pub fn m_n(&self) -> T {
        self.m_n.unwrap_or_else(|| choose_mn(self.n, &self.bounds))
    }
}

fn t<T: Scalar>(v: usize) -> T {
    T::from_usize_lossy(v)
}

fn q_sqrt_q<T: Scalar>(q: usize) -> T {
    let qf: T = t(q);
    qf * qf.sqrt()
}

/// max(A_Σ, 1 + K·A_G).
pub fn leading_constant<T: Scalar>(bounds: &ParameterBounds<T>, k: usize) -> T {
    bounds.a_sigma_max.max(T::one() + t::<T>(k) * bounds.a_g_max())
}

/// A_γ + q·A_β + q√q/a_Σ.
pub fn parameter_radius<T: Scalar>(bounds: &ParameterBounds<T>, q: usize) -> T {
    bounds.a_gamma_sup + t::<T>(q) * bounds.a_beta_sup + q_sqrt_q::<T>(q) / bounds.a_sigma_min
}

/// M_n = A_β + √(A_β² + 4A_Σ ln n), the positive root balancing the tail term.
pub fn choose_mn<T: Scalar>(n: usize, bounds: &ParameterBounds<T>) -> T {
    let ab = bounds.a_beta_sup;
    ab + (ab * ab + T::lit(4.0) * bounds.a_sigma_max * t::<T>(n).ln()).sqrt()
}

/// B_n = max(A_Σ, 1+K·A_G)·(1 + q√q·(M_n + A_β)²·A_Σ).
pub fn b_n<T: Scalar>(m_n: T, bounds: &ParameterBounds<T>, q: usize, k: usize) -> T {
    let s = m_n + bounds.a_beta_sup;
    leading_constant(bounds, k) * (T::one() + q_sqrt_q::<T>(q) * s * s * bounds.a_sigma_max)
}

/// B'_n = max(A_Σ, 1+K·A_G)·(1 + 2q√q·A_Σ·(5A_β² + 4A_Σ ln n)).
pub fn b_n_prime<T: Scalar>(n: usize, bounds: &ParameterBounds<T>, q: usize, k: usize) -> T {
    let ab = bounds.a_beta_sup;
    let inner = T::lit(5.0) * ab * ab + T::lit(4.0) * bounds.a_sigma_max * t::<T>(n).ln();
    leading_constant(bounds, k) * (T::one() + T::lit(2.0) * q_sqrt_q::<T>(q) * bounds.a_sigma_max * inner)
}

/// λ_min = κ·K·B'_n/√n·(q·ln n·√ln(2p+1) + 1).
pub fn lambda_min<T: Scalar>(inputs: &BoundInputs<T>) -> Result<T> {
    inputs.validate()?;
    let (n, p, q, k) = (inputs.n, inputs.p, inputs.q, inputs.k);
    let nf: T = t(n);
    let bp = b_n_prime(n, &inputs.bounds, q, k);
    let factor = t::<T>(q) * nf.ln() * t::<T>(2 * p + 1).ln().sqrt() + T::one();
    Ok(inputs.kappa * t::<T>(k) * bp / nf.sqrt() * factor)
}

/// The unfolded condition λ ≥ κ·4K·B_n/√n·(37q·ln n·√ln(2p+1) + 1), with
/// B_n at M_n, for which any κ ≥ 1 is admissible.
pub fn lambda_min_original<T: Scalar>(inputs: &BoundInputs<T>) -> Result<T> {
    let relaxed = BoundInputs {
        allow_small_kappa: true,
        ..*inputs
    };
    relaxed.validate()?;
    if inputs.kappa < T::one() {
        return Err(SgameError::InvalidConfig(format!(
            "the unfolded condition needs kappa >= 1, got {}",
            inputs.kappa
        )));
    }
    let (n, p, q, k) = (inputs.n, inputs.p, inputs.q, inputs.k);
    let nf: T = t(n);
    let bn = b_n(inputs.m_n(), &inputs.bounds, q, k);
    let factor = T::lit(37.0) * t::<T>(q) * nf.ln() * t::<T>(2 * p + 1).ln().sqrt() + T::one();
    Ok(inputs.kappa * T::lit(4.0) * t::<T>(k) * bn / nf.sqrt() * factor)
}

/// Δ_m = m·√ln(2p+1)·ln n + 2√K·(A_γ + qA_β + q√q/a_Σ).
pub fn delta_m<T: Scalar>(m: usize, p: usize, n: usize, bounds: &ParameterBounds<T>, q: usize, k: usize) -> T {
    t::<T>(m) * t::<T>(2 * p + 1).ln().sqrt() * t::<T>(n).ln()
        + T::lit(2.0) * t::<T>(k).sqrt() * parameter_radius(bounds, q)
}

/// R_n = 2K·B_n·(A_γ + qA_β + q√q/a_Σ).
pub fn r_n<T: Scalar>(bounds: &ParameterBounds<T>, q: usize, k: usize, b_n_value: T) -> T {
    T::lit(2.0) * t::<T>(k) * b_n_value * parameter_radius(bounds, q)
}

/// Natural log of the δ-packing bound of the l1-ball model class of radius m.
pub fn log_packing_bound<T: Scalar>(
    delta: T,
    m: usize,
    b_n_value: T,
    p: usize,
    q: usize,
    k: usize,
    bounds: &ParameterBounds<T>,
) -> T {
    let (qf, kf, mf): (T, T, T) = (t(q), t(k), t(m));
    let c18 = T::lit(18.0) * b_n_value * kf / delta;
    let lead = T::lit(72.0) * b_n_value * b_n_value * qf * qf * kf * kf * mf * mf / (delta * delta)
        * t::<T>(2 * p + 1).ln();
    lead + kf
        * ((c18 * qf * bounds.a_beta_sup).ln_1p()
            + (c18 * bounds.a_gamma_sup).ln_1p()
            + (c18 * q_sqrt_q::<T>(q) / bounds.a_sigma_min).ln_1p())
}

/// The packing bound on its natural scale: (2p+1)^{72B_n²q²K²m²/δ²}·Π(1 + …)^K.
/// Overflows to infinity for small δ; use [`log_packing_bound`] there.
pub fn packing_bound_direct<T: Scalar>(
    delta: T,
    m: usize,
    b_n_value: T,
    p: usize,
    q: usize,
    k: usize,
    bounds: &ParameterBounds<T>,
) -> T {
    let (qf, kf, mf): (T, T, T) = (t(q), t(k), t(m));
    let expo = T::lit(72.0) * b_n_value * b_n_value * qf * qf * kf * kf * mf * mf / (delta * delta);
    let c18 = T::lit(18.0) * b_n_value * kf / delta;
    let prod = (T::one() + c18 * qf * bounds.a_beta_sup)
        * (T::one() + c18 * bounds.a_gamma_sup)
        * (T::one() + c18 * q_sqrt_q::<T>(q) / bounds.a_sigma_min);
    t::<T>(2 * p + 1).powf(expo) * prod.powi(k as i32)
}

/// 2·K·n·q·A_γ·exp(−(M_n² − 2M_nA_β)/(2A_Σ)), a bound on P(Tᶜ).
pub fn tail_bound<T: Scalar>(m_n: T, n: usize, k: usize, q: usize, bounds: &ParameterBounds<T>) -> T {
    let expo = -(m_n * m_n - T::lit(2.0) * m_n * bounds.a_beta_sup) / (T::lit(2.0) * bounds.a_sigma_max);
    T::lit(2.0) * t::<T>(k) * t::<T>(n) * t::<T>(q) * bounds.a_gamma_sup * expo.exp()
}

/// exp(−t²/2) ≥ P(Z ≥ t) for a standard normal Z.
pub fn chernoff_gaussian_tail<T: Scalar>(t: T) -> T {
    (-t * t * T::lit(0.5)).exp()
}

/// The right-hand side of the l1-oracle inequality, term by term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OracleRhs<T> {
    /// (1 + 1/κ)·(inf term + λ·‖ψ^{[1,2]}‖₁).
    pub term1: T,
    /// λ.
    pub term2: T,
    /// √(K/n)·(e^{q/2−1}π^{q/2}/A_Σ^{q/2} + H_{s₀})·√(2qA_γ).
    pub term3: T,
    /// 302·q·√(K/n)·B'_n·K·(1 + (A_γ + qA_β + q√q/a_Σ)²).
    pub term4: T,
    pub total: T,
}

/// Evaluates the oracle right-hand side; `lambda` must satisfy [`lambda_min`].
pub fn oracle_rhs<T: Scalar>(kl_inf_term: T, l1_norm_psi0: T, inputs: &BoundInputs<T>, lambda: T) -> Result<OracleRhs<T>> {
    let minimum = lambda_min(inputs)?;
    if lambda < minimum || lambda.is_nan() {
        return Err(SgameError::LambdaBelowMinimum {
            lambda: lambda.as_f64(),
            minimum: minimum.as_f64(),
        });
    }
    Ok(oracle_rhs_unchecked(kl_inf_term, l1_norm_psi0, inputs, lambda))
}

/// [`oracle_rhs`] without the λ ≥ λ_min hypothesis; the value is then not a bound.
pub fn oracle_rhs_unchecked<T: Scalar>(kl_inf_term: T, l1_norm_psi0: T, inputs: &BoundInputs<T>, lambda: T) -> OracleRhs<T> {
    let b = &inputs.bounds;
    let (n, q, k) = (inputs.n, inputs.q, inputs.k);
    let qf: T = t(q);
    let half_q = qf * T::lit(0.5);
    let root = (t::<T>(k) / t::<T>(n)).sqrt();
    let term1 = (T::one() + T::one() / inputs.kappa) * (kl_inf_term + lambda * l1_norm_psi0);
    let (_, h) = entropy_constants(b, q);
    let pi = T::lit(std::f64::consts::PI);
    let gauss = (half_q - T::one()).exp() * pi.powf(half_q) / b.a_sigma_max.powf(half_q);
    let term3 = root * (gauss + h) * (T::lit(2.0) * qf * b.a_gamma_sup).sqrt();
    let rad = parameter_radius(b, q);
    let term4 =
        T::lit(302.0) * qf * root * b_n_prime(n, b, q, k) * t::<T>(k) * (T::one() + rad * rad);
    OracleRhs {
        term1,
        term2: lambda,
        term3,
        term4,
        total: term1 + lambda + term3 + term4,
    }
}

/// Every constant for one (n, p, q, K, bounds, κ), as emitted by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BoundsReport<T> {
    pub inputs: BoundInputs<T>,
    pub theorem_kappa: bool,
    pub m_n: T,
    pub b_n: T,
    pub b_n_prime: T,
    pub lambda_min: T,
    pub lambda_min_original: Option<T>,
    pub r_n: T,
    pub delta_m: Vec<(usize, T)>,
    pub tail_bound: T,
    pub entropy_c: T,
    pub entropy_h: T,
    /// The oracle right-hand side at λ = λ_min with a zero inf term and ψ₀ = 0.
    pub oracle_remainder: OracleRhs<T>,
}

impl<T: Scalar> BoundsReport<T> {
    pub fn compute(inputs: &BoundInputs<T>, m_grid: &[usize]) -> Result<Self> {
        inputs.validate()?;
        let (n, p, q, k) = (inputs.n, inputs.p, inputs.q, inputs.k);
        let b = &inputs.bounds;
        let m_n = inputs.m_n();
        let bn = b_n(m_n, b, q, k);
        let lmin = lambda_min(inputs)?;
        let (c, h) = entropy_constants(b, q);
        Ok(BoundsReport {
            inputs: *inputs,
            theorem_kappa: inputs.is_theorem_kappa(),
            m_n,
            b_n: bn,
            b_n_prime: b_n_prime(n, b, q, k),
            lambda_min: lmin,
            lambda_min_original: lambda_min_original(inputs).ok(),
            r_n: r_n(b, q, k, bn),
            delta_m: m_grid.iter().map(|&m| (m, delta_m(m, p, n, b, q, k))).collect(),
            tail_bound: tail_bound(m_n, n, k, q, b),
            entropy_c: c,
            entropy_h: h,
            oracle_remainder: oracle_rhs_unchecked(T::zero(), T::zero(), inputs, lmin),
        })
    }
}
