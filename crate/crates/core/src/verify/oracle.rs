use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{default_truth, stream_rng, LemmaReport};
use crate::bounds::{b_n_prime, lambda_min, oracle_rhs_unchecked, BoundInputs, OracleRhs, THEOREM_KAPPA};
use crate::dataset::{uniform_design, Dataset};
use crate::divergence::{kl_n, KlMethod};
use crate::error::{Result, SgameError};
use crate::estimator::{fit_lasso, FitConfig};
use crate::model::SgameParams;

fn theorem_kappa() -> f64 {
    THEOREM_KAPPA
}

/// Penalty levels of the oracle experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaPolicy {
    /// λ = λ_min(n) at this κ.
    TheoremMinimum { kappa: f64 },
    /// Fixed values; the right-hand side is evaluated at `kappa` and is
    /// reported as NaN wherever λ < λ_min.
    Grid {
        values: Vec<f64>,
        #[serde(default = "theorem_kappa")]
        kappa: f64,
    },
}

impl LambdaPolicy {
    fn kappa(&self) -> f64 {
        match self {
            LambdaPolicy::TheoremMinimum { kappa } | LambdaPolicy::Grid { kappa, .. } => *kappa,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub truth: SgameParams<f64>,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub lambda_policy: LambdaPolicy,
    pub kl_method: KlMethod,
    pub seed: u64,
    pub fit_cfg: FitConfig,
    /// Standard errors added to the empirical mean before comparing with the bound.
    pub mc_slack: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            truth: default_truth(),
            n_grid: vec![100, 200, 400],
            replications: 50,
            lambda_policy: LambdaPolicy::TheoremMinimum { kappa: THEOREM_KAPPA },
            kl_method: KlMethod::Quadrature {
                nodes: 1601,
                truncation: None,
            },
            seed: 0,
            fit_cfg: FitConfig::default(),
            mc_slack: 2.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.truth.check_bounds()?;
        self.fit_cfg.validate()?;
        self.kl_method.validate(self.truth.q())?;
        if self.replications < 10 {
            return Err(SgameError::InvalidConfig(format!(
                "replications must be at least 10, got {}",
                self.replications
            )));
        }
        if self.n_grid.is_empty() || self.n_grid.iter().any(|&n| n < 2) {
            return Err(SgameError::InvalidConfig("n_grid must be nonempty with every n >= 2".into()));
        }
        if !(self.mc_slack >= 0.0) {
            return Err(SgameError::InvalidConfig(format!("mc_slack must be nonnegative, got {}", self.mc_slack)));
        }
        let kappa = self.lambda_policy.kappa();
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(SgameError::InvalidConfig(format!("kappa must be positive, got {kappa}")));
        }
        if let LambdaPolicy::Grid { values, .. } = &self.lambda_policy {
            if values.is_empty() {
                return Err(SgameError::InvalidConfig("lambda grid is empty".into()));
            }
            if let Some(&v) = values.iter().find(|v| !(**v >= 0.0)) {
                return Err(SgameError::NegativeLambda(v));
            }
        }
        Ok(())
    }
}

/// One (n, λ) point of the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub n: usize,
    pub lambda: f64,
    /// Replications whose fit succeeded.
    pub rep_count: usize,
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs: OracleRhs<f64>,
    pub holds: bool,
    pub kappa: f64,
    pub lambda_min: f64,
    pub b_n_prime: f64,
    pub theorem_kappa: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
    pub mc_slack: f64,
    /// Messages of fits that failed; they are left out of the averages.
    pub failures: Vec<String>,
}

pub const ORACLE_CSV_HEADER: [&str; 11] = [
    "n", "lambda", "rep_count", "lhs_mean", "lhs_se", "rhs", "rhs_term1", "rhs_term2", "rhs_term3", "rhs_term4", "holds",
];

impl OracleReport {
    pub fn all_hold(&self) -> bool {
        self.rows.iter().all(|r| r.holds)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(ORACLE_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.lambda.to_string(),
                r.rep_count.to_string(),
                r.lhs_mean.to_string(),
                r.lhs_se.to_string(),
                r.rhs.total.to_string(),
                r.rhs.term1.to_string(),
                r.rhs.term2.to_string(),
                r.rhs.term3.to_string(),
                r.rhs.term4.to_string(),
                r.holds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// The experiment as a lemma report: one trial per grid point, the
    /// worst case being the largest (lhs_mean + slack·se)/rhs.
    pub fn to_lemma_report(&self) -> LemmaReport {
        let ratio = |r: &OracleRow| (r.lhs_mean + self.mc_slack * r.lhs_se) / r.rhs.total;
        let worst = self.rows.iter().max_by(|a, b| ratio(a).total_cmp(&ratio(b)));
        let witness = self.rows.iter().find(|r| !r.holds).or(worst);
        LemmaReport {
            suite: "oracle_inequality".into(),
            trials: self.rows.len(),
            violations: self.rows.iter().filter(|r| !r.holds).count(),
            worst_case: worst.map_or(f64::NAN, ratio),
            witness: witness.map(|r| json!(r)),
            details: json!({ "rows": self.rows, "failures": self.failures }),
        }
    }
}

const RESPONSE_STREAM: u64 = 1 << 40;

fn kl_method_for(method: KlMethod, task: u64) -> KlMethod {
    match method {
        KlMethod::MonteCarlo { samples, seed } => KlMethod::MonteCarlo {
            samples,
            seed: seed.wrapping_add(task.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        },
        m => m,
    }
}

/// Runs the oracle experiment: for each n a design fixed across
/// replications, fresh responses per replication, a Lasso fit per λ and
/// KL_n(s₀, ŝ) averaged over replications, compared with the right-hand
/// side evaluated at ψ₀ (so the infimum term is bounded by λ‖ψ₀^{[1,2]}‖₁).
pub fn run_oracle_experiment(cfg: &ExperimentConfig) -> Result<OracleReport> {
    cfg.validate()?;
    let truth = &cfg.truth;
    let (p, q, k) = (truth.p(), truth.q(), truth.k());
    let kappa = cfg.lambda_policy.kappa();
    let l1_truth = truth.penalized_l1();
    let mut points = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let design = uniform_design::<f64, _>(n, p, &mut stream_rng(cfg.seed, ni as u64));
        let mut inputs = BoundInputs::new(n, p, q, truth.bounds, kappa);
        inputs.allow_small_kappa = kappa < THEOREM_KAPPA;
        let lmin = lambda_min(&inputs)?;
        let lambdas = match &cfg.lambda_policy {
            LambdaPolicy::TheoremMinimum { .. } => vec![lmin],
            LambdaPolicy::Grid { values, .. } => values.clone(),
        };
        points.push((ni, n, design, inputs, lmin, lambdas));
    }
    let tasks: Vec<(usize, usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(pi, pt)| (0..pt.5.len()).flat_map(move |li| (0..cfg.replications).map(move |r| (pi, li, r))))
        .collect();
    let outcomes: Vec<Result<f64>> = tasks
        .par_iter()
        .map(|&(pi, li, rep)| {
            let (ni, _, design, _, _, lambdas) = &points[pi];
            let task = ((*ni as u64) << 20) | rep as u64;
            // same responses for every λ of a replication
            let mut rng = stream_rng(cfg.seed, RESPONSE_STREAM | task);
            let data = Dataset::simulate(truth, design.clone(), &mut rng)?;
            let fit = fit_lasso(&data, k, lambdas[li], &truth.bounds, &cfg.fit_cfg)?;
            Ok(kl_n(truth, &fit.params, design, kl_method_for(cfg.kl_method, task))?.value)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut idx = 0;
    for (_, n, _, inputs, lmin, lambdas) in &points {
        for &lambda in lambdas {
            let mut values = Vec::with_capacity(cfg.replications);
            let mut first_err = None;
            for _ in 0..cfg.replications {
                match &outcomes[idx] {
                    Ok(v) => values.push(*v),
                    Err(e) => {
                        log::warn!("n = {n}, λ = {lambda}: replication failed: {e}");
                        failures.push(format!("n={n} lambda={lambda}: {e}"));
                        first_err.get_or_insert_with(|| e.to_string());
                    }
                }
                idx += 1;
            }
            if values.is_empty() {
                return Err(SgameError::InvalidConfig(format!(
                    "every replication failed at n = {n}, lambda = {lambda}: {}",
                    first_err.unwrap_or_default()
                )));
            }
            let m = values.len() as f64;
            let mean = values.iter().sum::<f64>() / m;
            let var = if values.len() > 1 {
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            let se = (var / m).sqrt();
            let rhs = if lambda >= *lmin {
                oracle_rhs_unchecked(0.0, l1_truth, inputs, lambda)
            } else {
                OracleRhs {
                    term1: f64::NAN,
                    term2: lambda,
                    term3: f64::NAN,
                    term4: f64::NAN,
                    total: f64::NAN,
                }
            };
            rows.push(OracleRow {
                n: *n,
                lambda,
                rep_count: values.len(),
                lhs_mean: mean,
                lhs_se: se,
                holds: mean + cfg.mc_slack * se <= rhs.total,
                rhs,
                kappa,
                lambda_min: *lmin,
                b_n_prime: b_n_prime(*n, &truth.bounds, q, k),
                theorem_kappa: inputs.is_theorem_kappa(),
            });
        }
    }
    Ok(OracleReport {
        rows,
        mc_slack: cfg.mc_slack,
        failures,
    })
}
