//! Kullback–Leibler losses between conditional densities and the Gaussian
//! closed forms used as oracles and in the entropy constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgameError};
use crate::linalg::{Cholesky, Matrix};
use crate::model::{ParameterBounds, PreparedModel, SgameParams};
use crate::scalar::{ln_2pi, Scalar};

/// How a KL integral over y is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KlMethod {
    /// Average of ln(s₀/s) over draws from the truth; unbiased.
    MonteCarlo { samples: usize, seed: u64 },
    /// Composite trapezoid rule on [c − M, c + M] (q = 1 only). `truncation`
    /// is M; when absent it is chosen from the truth's means and variances so
    /// the neglected Gaussian tail mass is far below 1e−12.
    Quadrature { nodes: usize, truncation: Option<f64> },
}

impl Default for KlMethod {
    fn default() -> Self {
        KlMethod::MonteCarlo {
            samples: 20_000,
            seed: 0,
        }
    }
}

impl KlMethod {
    pub fn validate(&self, q: usize) -> Result<()> {
        match *self {
            KlMethod::MonteCarlo { samples, .. } if samples < 1000 => Err(SgameError::InvalidConfig(format!(
                "Monte Carlo KL needs at least 1000 samples, got {samples}"
            ))),
            KlMethod::Quadrature { nodes, .. } if nodes < 64 => Err(SgameError::InvalidConfig(format!(
                "quadrature KL needs at least 64 nodes, got {nodes}"
            ))),
            KlMethod::Quadrature { truncation: Some(m), .. } if !(m > 0.0 && m.is_finite()) => Err(
                SgameError::InvalidConfig(format!("quadrature truncation must be positive, got {m}")),
            ),
            KlMethod::Quadrature { .. } if q != 1 => Err(SgameError::QuadratureDimension(q)),
            _ => Ok(()),
        }
    }
}

/// A KL value with its Monte Carlo standard error (0 for quadrature).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KlEstimate<T> {
    pub value: T,
    pub std_error: T,
}

/// Number of standard deviations kept on each side by the automatic truncation.
const AUTO_TRUNCATION_SDS: f64 = 10.0;

/// Composite trapezoid rule with `nodes` equally spaced points on [lo, hi].
pub fn trapezoid<T: Scalar>(lo: T, hi: T, nodes: usize, mut f: impl FnMut(T) -> T) -> T {
    assert!(nodes >= 2, "trapezoid rule needs two nodes");
    let h = (hi - lo) / T::from_usize_lossy(nodes - 1);
    let half = T::lit(0.5);
    let mut s = half * (f(lo) + f(hi));
    for i in 1..nodes - 1 {
        s = s + f(lo + h * T::from_usize_lossy(i));
    }
    s * h
}

fn check_pair<T: Scalar>(truth: &SgameParams<T>, candidate: &SgameParams<T>) -> Result<()> {
    if truth.p() != candidate.p() {
        return Err(SgameError::dim("candidate covariate dimension p", truth.p(), candidate.p()));
    }
    if truth.q() != candidate.q() {
        return Err(SgameError::dim("candidate response dimension q", truth.q(), candidate.q()));
    }
    Ok(())
}

/// Center and half-width of the quadrature window for the truth at x (q = 1).
fn quadrature_window<T: Scalar>(truth: &PreparedModel<'_, T>, x: &[T], truncation: Option<f64>) -> (T, T) {
    let psi = truth.params();
    let means: Vec<T> = (0..psi.k()).map(|k| truth.mean(k, x)[0]).collect();
    let lo = means.iter().copied().fold(T::infinity(), T::min);
    let hi = means.iter().copied().fold(T::neg_infinity(), T::max);
    let center = T::lit(0.5) * (lo + hi);
    let half_width = match truncation {
        Some(m) => T::lit(m),
        None => {
            let sd = psi
                .experts
                .covariances
                .iter()
                .map(|s| s[(0, 0)].sqrt())
                .fold(T::zero(), T::max);
            T::lit(0.5) * (hi - lo) + T::lit(AUTO_TRUNCATION_SDS) * sd
        }
    };
    (center, half_width)
}

struct RowEstimate<T> {
    value: T,
    variance_of_mean: T,
}

fn kl_row<T: Scalar>(
    truth: &PreparedModel<'_, T>,
    candidate: Option<&PreparedModel<'_, T>>,
    x: &[T],
    method: KlMethod,
    stream: u64,
) -> Result<RowEstimate<T>> {
    // candidate = None integrates ln s₀ itself (the entropy integral).
    let log_ratio = |y: &[T]| -> Result<T> {
        let a = truth.log_density(x, y)?;
        match candidate {
            Some(c) => Ok(a - c.log_density(x, y)?),
            None => Ok(a),
        }
    };
    match method {
        KlMethod::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut mean = 0.0f64;
            let mut m2 = 0.0f64;
            for i in 0..samples {
                let y = truth.sample(x, &mut rng)?;
                let v = log_ratio(&y)?.as_f64();
                let d = v - mean;
                mean += d / (i + 1) as f64;
                m2 += d * (v - mean);
            }
            let var = if samples > 1 { m2 / (samples - 1) as f64 } else { 0.0 };
            Ok(RowEstimate {
                value: T::lit(mean),
                variance_of_mean: T::lit(var / samples as f64),
            })
        }
        KlMethod::Quadrature { nodes, truncation } => {
            let (c, m) = quadrature_window(truth, x, truncation);
            let mut failure = None;
            let value = trapezoid(c - m, c + m, nodes, |y| {
                let yy = [y];
                let ld = match truth.log_density(x, &yy) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        return T::zero();
                    }
                };
                let d = ld.exp();
                if d == T::zero() {
                    return T::zero();
                }
                match log_ratio(&yy) {
                    Ok(r) => d * r,
                    Err(e) => {
                        failure.get_or_insert(e);
                        T::zero()
                    }
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(RowEstimate {
                value,
                variance_of_mean: T::zero(),
            })
        }
    }
}

/// ∫ ln(s₀(y|x)/s_ψ(y|x)) s₀(y|x) dy. Monte Carlo uses random stream 0 of the seed.
pub fn kl_conditional<T: Scalar>(
    truth: &SgameParams<T>,
    candidate: &SgameParams<T>,
    x: &[T],
    method: KlMethod,
) -> Result<KlEstimate<T>> {
    check_pair(truth, candidate)?;
    method.validate(truth.q())?;
    let t = PreparedModel::new(truth)?;
    let c = PreparedModel::new(candidate)?;
    let r = kl_row(&t, Some(&c), x, method, 0)?;
    Ok(KlEstimate {
        value: r.value,
        std_error: r.variance_of_mean.sqrt(),
    })
}

/// KL_n = (1/n) Σ_i KL(s₀(·|x_i), s_ψ(·|x_i)).
///
/// Row i uses random stream i of the seed, so two candidates compared under
/// the same seed see common random numbers.
pub fn kl_n<T: Scalar>(
    truth: &SgameParams<T>,
    candidate: &SgameParams<T>,
    design: &Matrix<T>,
    method: KlMethod,
) -> Result<KlEstimate<T>> {
    check_pair(truth, candidate)?;
    method.validate(truth.q())?;
    let t = PreparedModel::new(truth)?;
    let c = PreparedModel::new(candidate)?;
    average_rows(design, |x, i| kl_row(&t, Some(&c), x, method, i as u64))
}

/// (1/n) Σ_i ∫ ln s₀(y|x_i) s₀(y|x_i) dy, the negative mean differential entropy.
pub fn expected_log_density<T: Scalar>(truth: &SgameParams<T>, design: &Matrix<T>, method: KlMethod) -> Result<KlEstimate<T>> {
    method.validate(truth.q())?;
    let t = PreparedModel::new(truth)?;
    average_rows(design, |x, i| kl_row(&t, None, x, method, i as u64))
}

/// Per-row version of [`expected_log_density`].
pub fn expected_log_density_at<T: Scalar>(truth: &SgameParams<T>, x: &[T], method: KlMethod, stream: u64) -> Result<KlEstimate<T>> {
    method.validate(truth.q())?;
    let t = PreparedModel::new(truth)?;
    let r = kl_row(&t, None, x, method, stream)?;
    Ok(KlEstimate {
        value: r.value,
        std_error: r.variance_of_mean.sqrt(),
    })
}

fn average_rows<T: Scalar>(
    design: &Matrix<T>,
    mut row: impl FnMut(&[T], usize) -> Result<RowEstimate<T>>,
) -> Result<KlEstimate<T>> {
    let n = design.rows();
    if n == 0 {
        return Err(SgameError::InvalidDataset("empty design".into()));
    }
    let mut sum = T::zero();
    let mut var = T::zero();
    for i in 0..n {
        let r = row(design.row(i), i)?;
        sum = sum + r.value;
        var = var + r.variance_of_mean;
    }
    let nf = T::from_usize_lossy(n);
    Ok(KlEstimate {
        value: sum / nf,
        std_error: var.sqrt() / nf,
    })
}

fn spd<T: Scalar>(m: &Matrix<T>, name: &'static str, q: usize) -> Result<Cholesky<T>> {
    if m.rows() != q || m.cols() != q {
        return Err(SgameError::dim(format!("{name} size q*q"), q * q, m.rows() * m.cols()));
    }
    if !m.is_symmetric(T::lit(1e3) * T::epsilon()) {
        return Err(SgameError::NotSpd(name));
    }
    Cholesky::new(m).ok_or(SgameError::NotSpd(name))
}

/// KL(N(m1, S1) ‖ N(m2, S2)) = ½(tr(S2⁻¹S1) + (m2−m1)ᵀS2⁻¹(m2−m1) − q + ln det S2 − ln det S1).
pub fn gaussian_kl_closed_form<T: Scalar>(m1: &[T], s1: &Matrix<T>, m2: &[T], s2: &Matrix<T>) -> Result<T> {
    let q = m1.len();
    if m2.len() != q {
        return Err(SgameError::dim("second mean", q, m2.len()));
    }
    let c1 = spd(s1, "S1", q)?;
    let c2 = spd(s2, "S2", q)?;
    let inv2 = c2.inverse();
    let trace: T = (0..q).map(|i| (0..q).map(|j| inv2[(i, j)] * s1[(j, i)]).sum::<T>()).sum();
    let d: Vec<T> = m2.iter().zip(m1).map(|(&a, &b)| a - b).collect();
    let quad = c2.mahalanobis_sq(&d);
    Ok(T::lit(0.5) * (trace + quad - T::from_usize_lossy(q) + c2.log_det() - c1.log_det()))
}

/// ∫ φ(y; a, A) φ(y; b, B) dy = (2π)^{−q/2} det(A+B)^{−1/2} exp(−½(a−b)ᵀ(A+B)⁻¹(a−b)).
pub fn gaussian_product_constant<T: Scalar>(a: &[T], big_a: &Matrix<T>, b: &[T], big_b: &Matrix<T>) -> Result<T> {
    let q = a.len();
    if b.len() != q {
        return Err(SgameError::dim("second mean", q, b.len()));
    }
    spd(big_a, "A", q)?;
    spd(big_b, "B", q)?;
    let sum = big_a.add(big_b);
    let c = Cholesky::new(&sum).ok_or(SgameError::NotSpd("A+B"))?;
    let d: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let half = T::lit(0.5);
    Ok((-half * (T::from_usize_lossy(q) * ln_2pi::<T>() + c.log_det() + c.mahalanobis_sq(&d))).exp())
}

/// (C_{s₀}, H_{s₀}) = ((4π)^{−q/2} A_Σ^{q/2}, max(0, ln C_{s₀})).
pub fn entropy_constants<T: Scalar>(bounds: &ParameterBounds<T>, q: usize) -> (T, T) {
    let half_q = T::from_usize_lossy(q) * T::lit(0.5);
    let four_pi = T::lit(4.0 * std::f64::consts::PI);
    let ln_c = half_q * (bounds.a_sigma_max.ln() - four_pi.ln());
    (ln_c.exp(), ln_c.max(T::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaussian(mean: f64, var: f64) -> SgameParams<f64> {
        let b = ParameterBounds::new(1.0, 5.0, 0.01, 100.0, 1).unwrap();
        let mut psi = SgameParams::zeros(1, 1, b);
        psi.experts.intercepts[(0, 0)] = mean;
        psi.experts.covariances[0] = Matrix::from_diag(&[var]);
        psi
    }

    const QUAD: KlMethod = KlMethod::Quadrature {
        nodes: 4001,
        truncation: None,
    };

    #[test]
    fn quadrature_matches_closed_form_shift_and_scale() {
        let v = kl_conditional(&gaussian(0.0, 1.0), &gaussian(1.0, 1.0), &[0.5], QUAD).unwrap();
        assert!((v.value - 0.5).abs() < 1e-9);
        let v = kl_conditional(&gaussian(0.0, 1.0), &gaussian(0.0, 4.0), &[0.5], QUAD).unwrap();
        let want = 0.5 * (4f64.ln() + 0.25 - 1.0);
        assert!((v.value - want).abs() < 1e-9);
    }

    #[test]
    fn self_divergence_vanishes() {
        let psi = gaussian(0.3, 2.0);
        let q = kl_conditional(&psi, &psi, &[0.1], QUAD).unwrap();
        assert!(q.value.abs() <= 1e-12);
        let mc = kl_conditional(&psi, &psi, &[0.1], KlMethod::MonteCarlo { samples: 2000, seed: 1 }).unwrap();
        assert_eq!(mc.value, 0.0);
    }

    #[test]
    fn monte_carlo_within_three_se_of_truth() {
        let mc = kl_conditional(
            &gaussian(0.0, 1.0),
            &gaussian(1.0, 1.0),
            &[0.5],
            KlMethod::MonteCarlo { samples: 20_000, seed: 9 },
        )
        .unwrap();
        assert!((mc.value - 0.5).abs() <= 3.0 * mc.std_error, "{mc:?}");
    }

    #[test]
    fn kl_n_duplicate_rows_equal_single_row() {
        let (t, c) = (gaussian(0.0, 1.0), gaussian(0.7, 2.0));
        let one = kl_n(&t, &c, &Matrix::from_vec(1, 1, vec![0.2]), QUAD).unwrap();
        let two = kl_n(&t, &c, &Matrix::from_vec(2, 1, vec![0.2, 0.2]), QUAD).unwrap();
        let direct = kl_conditional(&t, &c, &[0.2], QUAD).unwrap();
        assert!((one.value - direct.value).abs() < 1e-15);
        assert!((two.value - direct.value).abs() < 1e-15);
    }

    #[test]
    fn method_validation() {
        assert!(KlMethod::MonteCarlo { samples: 10, seed: 0 }.validate(1).is_err());
        assert!(KlMethod::Quadrature { nodes: 10, truncation: None }.validate(1).is_err());
        assert!(matches!(
            KlMethod::Quadrature { nodes: 100, truncation: None }.validate(2),
            Err(SgameError::QuadratureDimension(2))
        ));
    }

    #[test]
    fn closed_form_hand_values() {
        let one = Matrix::from_diag(&[1.0f64]);
        assert_eq!(gaussian_kl_closed_form(&[0.0], &one, &[0.0], &one).unwrap(), 0.0);
        assert!((gaussian_kl_closed_form(&[0.0], &one, &[1.0], &one).unwrap() - 0.5).abs() < 1e-15);
        let p = gaussian_product_constant(&[0.0], &one, &[0.0], &one).unwrap();
        assert!((p - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
        let bad = Matrix::from_diag(&[-1.0f64]);
        assert!(gaussian_kl_closed_form(&[0.0], &bad, &[0.0], &one).is_err());
    }

    #[test]
    fn entropy_constants_hand_values() {
        let pi4 = 4.0 * std::f64::consts::PI;
        let b = ParameterBounds::new(1.0, 1.0, 0.1, pi4, 1).unwrap();
        let (c, h) = entropy_constants(&b, 1);
        assert!((c - 1.0).abs() < 1e-15 && h == 0.0);
        let b = ParameterBounds::new(1.0, 1.0, 0.1, pi4 * std::f64::consts::E, 1).unwrap();
        let (c, h) = entropy_constants(&b, 2);
        assert!((c - std::f64::consts::E).abs() < 1e-13 && (h - 1.0).abs() < 1e-14);
    }

    #[test]
    fn product_decays_along_ray() {
        let a = Matrix::from_vec(2, 2, vec![1.0f64, 0.2, 0.2, 0.5]);
        let b = Matrix::from_diag(&[0.7f64, 1.1]);
        let mut prev = f64::INFINITY;
        for t in 0..20 {
            let v = gaussian_product_constant(&[0.0, 0.0], &a, &[t as f64 * 0.5, -(t as f64) * 0.3], &b).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    fn spd2(e: &[f64]) -> Matrix<f64> {
        let b = Matrix::from_vec(2, 2, e.to_vec());
        b.matmul(&b.transpose()).add(&Matrix::identity(2).scaled(0.1))
    }

    proptest! {
        #[test]
        fn closed_form_kl_nonnegative(
            m in proptest::collection::vec(-3.0f64..3.0, 4),
            e in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let v = gaussian_kl_closed_form(&m[..2], &spd2(&e[..4]), &m[2..], &spd2(&e[4..])).unwrap();
            prop_assert!(v >= -1e-12);
        }
    }
}
