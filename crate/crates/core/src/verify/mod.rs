//! Numerical checks of the lemmas behind the oracle inequality, and the
//! oracle-inequality experiment itself. Everything here is `f64`.
//!
//! Each check draws from its own ChaCha stream of the given seed, so reports
//! are reproducible regardless of the thread count.

mod lemmas;
mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SgameError};
use crate::linalg::Matrix;
use crate::model::{ParameterBounds, SgameParams};

pub use lemmas::{
    product_integral, random_covariance, random_params, verify_em_monotonicity, verify_entropy_bound,
    verify_gradient_envelope, verify_product_constant, verify_tail_bound, verify_weyl, EmCase, EmLambda, EM_SLACK,
    PRODUCT_NODES, PRODUCT_TOLERANCE, WEYL_TOLERANCE,
};
pub use oracle::{run_oracle_experiment, ExperimentConfig, LambdaPolicy, OracleReport, OracleRow};

/// Outcome of one lemma suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub suite: String,
    pub trials: usize,
    pub violations: usize,
    /// Suite-specific extreme: the largest ratio, error, margin or increase
    /// seen. Non-finite values are written as null and read back as NaN.
    #[serde(deserialize_with = "nullable_f64")]
    pub worst_case: f64,
    /// The first violating input, or the worst trial when there is none.
    pub witness: Option<Value>,
    /// Extra measurements that are recorded but not asserted.
    #[serde(default)]
    pub details: Value,
}

fn nullable_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// A ChaCha8 generator on stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn check_at_least(what: &str, got: usize, min: usize) -> Result<()> {
    if got < min {
        return Err(SgameError::InvalidConfig(format!("{what} must be at least {min}, got {got}")));
    }
    Ok(())
}

/// Caps used by the default truth: A_γ = 1, A_β = 2, a_Σ = 0.5, A_Σ = 4.
pub fn default_bounds(k: usize) -> ParameterBounds<f64> {
    ParameterBounds {
        a_gamma_sup: 1.0,
        a_beta_sup: 2.0,
        a_sigma_min: 0.5,
        a_sigma_max: 4.0,
        k,
    }
}

/// A sparse two-expert truth with p = 10, q = 1: two active gating
/// coefficients and one active slope per expert.
pub fn default_truth() -> SgameParams<f64> {
    let mut psi = SgameParams::zeros(10, 1, default_bounds(2));
    psi.gating.intercepts[0] = 0.2;
    psi.gating.slopes[(0, 0)] = 0.6;
    psi.experts.intercepts[(0, 0)] = -1.0;
    psi.experts.intercepts[(1, 0)] = 1.0;
    psi.experts.slopes[0][(0, 1)] = 0.8;
    psi.experts.slopes[1][(0, 2)] = -0.7;
    psi.experts.covariances[0] = Matrix::from_diag(&[0.5]);
    psi.experts.covariances[1] = Matrix::from_diag(&[1.0]);
    psi
}

/// Settings of every lemma suite plus the oracle experiment, as run by
/// `verify all`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    /// (q, K, p) triples for the gradient envelope.
    pub gradient_cases: Vec<(usize, usize, usize)>,
    pub gradient_trials: usize,
    pub gradient_bounds: ParameterBounds<f64>,
    pub truth: SgameParams<f64>,
    /// Design size for the tail and entropy suites.
    pub n: usize,
    pub tail_reps: usize,
    /// Truncation level for the tail suite; M_n from the bounds module when absent.
    pub tail_m_n: Option<f64>,
    pub entropy_reps: usize,
    pub product_trials: usize,
    pub weyl_trials: usize,
    pub weyl_q: usize,
    pub em_datasets: usize,
    pub em_n: usize,
    pub em_cases: Vec<EmCase>,
    pub fit_cfg: crate::estimator::FitConfig,
    pub experiment: ExperimentConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            gradient_cases: vec![(1, 2, 5), (2, 3, 8)],
            gradient_trials: 1000,
            gradient_bounds: ParameterBounds {
                a_gamma_sup: 2.0,
                a_beta_sup: 3.0,
                a_sigma_min: 0.25,
                a_sigma_max: 5.0,
                k: 1,
            },
            truth: default_truth(),
            n: 100,
            tail_reps: 100_000,
            tail_m_n: None,
            entropy_reps: 10_000,
            product_trials: 50,
            weyl_trials: 1000,
            weyl_q: 4,
            em_datasets: 4,
            em_n: 200,
            em_cases: vec![
                EmCase { k: 1, lambda: EmLambda::MaxFraction(0.0) },
                EmCase { k: 1, lambda: EmLambda::MaxFraction(0.1) },
                EmCase { k: 1, lambda: EmLambda::MaxFraction(1.0) },
                EmCase { k: 2, lambda: EmLambda::MaxFraction(0.0) },
                EmCase { k: 2, lambda: EmLambda::MaxFraction(0.1) },
                EmCase { k: 2, lambda: EmLambda::MaxFraction(1.0) },
            ],
            fit_cfg: crate::estimator::FitConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Names accepted by [`run_suite`].
pub const SUITES: [&str; 7] = ["gradient", "tail", "entropy", "product", "weyl", "em", "oracle"];

/// Runs one named suite under `cfg`.
pub fn run_suite(name: &str, cfg: &VerifyConfig) -> Result<LemmaReport> {
    let seed = cfg.seed;
    match name {
        "gradient" => {
            let mut reports = Vec::new();
            for &(q, k, p) in &cfg.gradient_cases {
                let b = cfg.gradient_bounds.with_k(k);
                reports.push(verify_gradient_envelope(&b, q, k, p, cfg.gradient_trials, seed)?);
            }
            Ok(merge("gradient_envelope", reports))
        }
        "tail" => {
            let design = crate::dataset::uniform_design(cfg.n, cfg.truth.p(), &mut stream_rng(seed, 1));
            let m_n = cfg.tail_m_n.unwrap_or_else(|| crate::bounds::choose_mn(cfg.n, &cfg.truth.bounds));
            verify_tail_bound(&cfg.truth, &design, m_n, cfg.tail_reps, seed)
        }
        "entropy" => {
            let design = crate::dataset::uniform_design(cfg.n, cfg.truth.p(), &mut stream_rng(seed, 2));
            verify_entropy_bound(&cfg.truth, &design, cfg.entropy_reps, seed)
        }
        "product" => verify_product_constant(cfg.product_trials, seed),
        "weyl" => verify_weyl(cfg.weyl_trials, cfg.weyl_q, seed),
        "em" => {
            let datasets = (0..cfg.em_datasets)
                .map(|d| {
                    let mut rng = stream_rng(seed, 100 + d as u64);
                    let x = crate::dataset::uniform_design(cfg.em_n, cfg.truth.p(), &mut rng);
                    crate::dataset::Dataset::simulate(&cfg.truth, x, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            verify_em_monotonicity(&datasets, &cfg.em_cases, &cfg.truth.bounds, &cfg.fit_cfg)
        }
        "oracle" => Ok(run_oracle_experiment(&cfg.experiment)?.to_lemma_report()),
        other => Err(SgameError::InvalidConfig(format!(
            "unknown suite {other:?}; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

fn merge(suite: &str, reports: Vec<LemmaReport>) -> LemmaReport {
    let worst = reports.iter().map(|r| r.worst_case).fold(f64::NEG_INFINITY, f64::max);
    let witness = reports
        .iter()
        .find(|r| r.violations > 0)
        .or_else(|| reports.iter().max_by(|a, b| a.worst_case.total_cmp(&b.worst_case)))
        .and_then(|r| r.witness.clone());
    LemmaReport {
        suite: suite.to_string(),
        trials: reports.iter().map(|r| r.trials).sum(),
        violations: reports.iter().map(|r| r.violations).sum(),
        worst_case: worst,
        witness,
        details: Value::Array(reports.into_iter().map(|r| r.details).collect()),
    }
}
