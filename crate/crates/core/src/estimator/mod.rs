//! Lasso-penalized maximum likelihood by penalized EM, the l1-ball
//! constrained variant and the ball-radius selection rule.

mod experts;
mod gating;
mod init;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Result, SgameError};
use crate::linalg::{project_l1_ball, Matrix};
use crate::model::{responsibility_matrix, ParameterBounds, PreparedModel, SgameParams};

pub use experts::{expert_lambda_max, expert_objective, m_step_experts, EMPTY_COMPONENT_MASS};
pub use gating::{gating_loss, gating_objective, m_step_gating};
pub use init::{kmeans_labels, kmeans_responsibilities, random_responsibilities};

/// How the first E-step responsibilities of a restart are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// k-means on (x, y); every restart reseeds k-means++.
    #[default]
    KMeansResponsibilities,
    /// Uniform draws from the simplex.
    RandomSoftAssign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_em_iters: usize,
    /// Stop once (F_old − F_new) ≤ em_tol·max(1, |F_old|).
    pub em_tol: f64,
    /// Proximal-gradient steps (gating) and coordinate sweeps (experts) per M-step.
    pub inner_iters: usize,
    pub restarts: usize,
    pub seed: u64,
    pub init_strategy: InitStrategy,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_em_iters: 500,
            em_tol: 1e-7,
            inner_iters: 25,
            restarts: 5,
            seed: 0,
            init_strategy: InitStrategy::KMeansResponsibilities,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_em_iters == 0 {
            return Err(SgameError::InvalidConfig("max_em_iters must be at least 1".into()));
        }
        if !(self.em_tol > 0.0) {
            return Err(SgameError::InvalidConfig(format!("em_tol must be positive, got {}", self.em_tol)));
        }
        if self.restarts == 0 {
            return Err(SgameError::InvalidConfig("restarts must be at least 1".into()));
        }
        if self.inner_iters == 0 {
            return Err(SgameError::InvalidConfig("inner_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one fit (the best restart).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: SgameParams<f64>,
    /// Objective after initialization and after every accepted EM iteration.
    pub penalized_nll_trace: Vec<f64>,
    pub final_penalized_nll: f64,
    /// Unpenalized −(1/n) Σ ln s_ψ̂(y_i|x_i).
    pub nll: f64,
    pub lambda: f64,
    /// l1 radius for ball-constrained fits.
    pub ball_radius: Option<usize>,
    pub penalized_l1: f64,
    /// K×p: nonzero gating slopes.
    pub active_gating: Vec<Vec<bool>>,
    /// K×q×p: nonzero expert slopes.
    pub active_experts: Vec<Vec<Vec<bool>>>,
    pub converged: bool,
    pub iterations: usize,
    pub restart: usize,
}

impl FitResult {
    pub fn active_count(&self) -> usize {
        let g = self.active_gating.iter().flatten().filter(|&&a| a).count();
        let e = self.active_experts.iter().flatten().flatten().filter(|&&a| a).count();
        g + e
    }
}

fn masks(psi: &SgameParams<f64>) -> (Vec<Vec<bool>>, Vec<Vec<Vec<bool>>>) {
    let g = (0..psi.k())
        .map(|k| psi.gating.slopes.row(k).iter().map(|&v| v != 0.0).collect())
        .collect();
    let e = psi
        .experts
        .slopes
        .iter()
        .map(|m| (0..m.rows()).map(|z| m.row(z).iter().map(|&v| v != 0.0).collect()).collect())
        .collect();
    (g, e)
}

fn check_data(psi: &SgameParams<f64>, data: &Dataset<f64>) -> Result<()> {
    if psi.p() != data.p() {
        return Err(SgameError::dim("covariate dimension p", psi.p(), data.p()));
    }
    if psi.q() != data.q() {
        return Err(SgameError::dim("response dimension q", psi.q(), data.q()));
    }
    Ok(())
}

/// −(1/n) Σ_i ln s_ψ(y_i|x_i).
pub fn nll(psi: &SgameParams<f64>, data: &Dataset<f64>) -> Result<f64> {
    check_data(psi, data)?;
    let model = PreparedModel::new(psi)?;
    let mut s = 0.0;
    for i in 0..data.n() {
        s += model.log_density(data.x(i), data.y(i))?;
    }
    Ok(-s / data.n() as f64)
}

/// −(1/n) Σ_i ln s_ψ(y_i|x_i) + λ‖ψ^{[1,2]}‖₁.
pub fn penalized_nll(psi: &SgameParams<f64>, data: &Dataset<f64>, lambda: f64) -> Result<f64> {
    let pen = psi.penalty(lambda)?;
    Ok(nll(psi, data)? + pen)
}

/// n×K posterior responsibilities, computed in log space.
pub fn e_step(psi: &SgameParams<f64>, data: &Dataset<f64>) -> Result<Matrix<f64>> {
    check_data(psi, data)?;
    let model = PreparedModel::new(psi)?;
    responsibility_matrix(&model, data.design(), data.responses())
}

/// λ at which a single-expert fit keeps every slope at zero: the largest
/// |(1/n) Σ_i x_ij [Σ̂⁻¹(y_i − ȳ)]_z| with Σ̂ the clipped sample covariance.
pub fn lambda_max(data: &Dataset<f64>, bounds: &ParameterBounds<f64>) -> Result<f64> {
    let b1 = bounds.with_k(1);
    let resp = Matrix::from_vec(data.n(), 1, vec![1.0; data.n()]);
    let init = SgameParams::zeros(data.p(), data.q(), b1);
    let cfg = FitConfig {
        inner_iters: 1,
        ..FitConfig::default()
    };
    // intercept-only M-step gives ȳ and the clipped residual covariance
    let mut null = init.experts.clone();
    null.slopes.iter_mut().for_each(|m| m.as_mut_slice().iter_mut().for_each(|v| *v = 0.0));
    let huge = f64::MAX.sqrt();
    let null = m_step_experts(&resp, data, &null, huge, &ParameterBounds { a_beta_sup: huge, ..b1 }, &cfg)?;
    expert_lambda_max(&resp, data, &null)
}

/// A λ for which every penalized coefficient of any fit started by this
/// module stays exactly zero, for every K:
/// max(1, A_Σ·√q·mean_i(‖y_i‖∞ + A_β)).
pub fn lambda_all_zero(data: &Dataset<f64>, bounds: &ParameterBounds<f64>) -> f64 {
    let q = data.q() as f64;
    let mean: f64 = (0..data.n())
        .map(|i| data.y(i).iter().fold(0.0f64, |m, v| m.max(v.abs())) + bounds.a_beta_sup)
        .sum::<f64>()
        / data.n() as f64;
    (bounds.a_sigma_max * q.sqrt() * mean).max(1.0)
}

#[derive(Clone, Copy, Debug)]
enum Mode {
    Lasso(f64),
    Ball(usize),
}

impl Mode {
    fn lambda(self) -> f64 {
        match self {
            Mode::Lasso(l) => l,
            Mode::Ball(_) => 0.0,
        }
    }
}

fn m_steps(
    resp: &Matrix<f64>,
    data: &Dataset<f64>,
    from: &SgameParams<f64>,
    mode: Mode,
    cfg: &FitConfig,
) -> Result<SgameParams<f64>> {
    let lambda = mode.lambda();
    let bounds = from.bounds;
    let gating = m_step_gating(resp, data.design(), &from.gating, lambda, &bounds, cfg)?;
    let experts = m_step_experts(resp, data, &from.experts, lambda, &bounds, cfg)?;
    let mut next = SgameParams {
        gating,
        experts,
        bounds,
    };
    if let Mode::Ball(m) = mode {
        let v = next.penalized_coords();
        next.set_penalized_coords(&project_l1_ball(&v, m as f64));
    }
    Ok(next)
}

fn blend(a: &SgameParams<f64>, b: &SgameParams<f64>, t: f64) -> SgameParams<f64> {
    let (va, vb) = (a.to_flat(), b.to_flat());
    let mut out = a.clone();
    let mixed: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x + t * (y - x)).collect();
    out.set_flat(&mixed);
    // keep covariances exactly symmetric
    for s in out.experts.covariances.iter_mut() {
        for i in 0..s.rows() {
            for j in 0..i {
                s[(j, i)] = s[(i, j)];
            }
        }
    }
    out
}

fn objective(psi: &SgameParams<f64>, data: &Dataset<f64>, mode: Mode) -> Result<f64> {
    penalized_nll(psi, data, mode.lambda())
}

fn initial(data: &Dataset<f64>, bounds: &ParameterBounds<f64>, mode: Mode, cfg: &FitConfig, restart: usize) -> Result<SgameParams<f64>> {
    let k = bounds.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let resp = match cfg.init_strategy {
        InitStrategy::KMeansResponsibilities => kmeans_responsibilities(data, k, &mut rng),
        InitStrategy::RandomSoftAssign => random_responsibilities(data.n(), k, &mut rng),
    };
    let start = SgameParams::zeros(data.p(), data.q(), *bounds);
    m_steps(&resp, data, &start, mode, cfg)
}

fn fit_one(data: &Dataset<f64>, bounds: &ParameterBounds<f64>, mode: Mode, cfg: &FitConfig, restart: usize) -> Result<FitResult> {
    let psi = initial(data, bounds, mode, cfg, restart)?;
    run_em(data, psi, mode, cfg, restart)
}

fn run_em(data: &Dataset<f64>, mut psi: SgameParams<f64>, mode: Mode, cfg: &FitConfig, restart: usize) -> Result<FitResult> {
    let mut f = objective(&psi, data, mode)?;
    if !f.is_finite() {
        return Err(SgameError::NonFinite("initial objective".into()));
    }
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_em_iters {
        iterations += 1;
        let resp = e_step(&psi, data)?;
        let cand = m_steps(&resp, data, &psi, mode, cfg)?;
        let mut accepted = None;
        let slack = 1e-12 * f.abs().max(1.0);
        let fc = objective(&cand, data, mode)?;
        if fc <= f + slack {
            accepted = Some((cand, fc));
        } else if let Mode::Ball(_) = mode {
            // the ball projection can undo the M-step descent; search the segment
            let mut t = 0.5;
            while t > 1e-9 {
                let mid = blend(&psi, &cand, t);
                let fm = objective(&mid, data, mode)?;
                if fm <= f + slack {
                    accepted = Some((mid, fm));
                    break;
                }
                t *= 0.5;
            }
        } else {
            log::debug!("restart {restart}: EM step would increase the objective by {:e}; stopping", fc - f);
        }
        let Some((next, fn_)) = accepted else {
            converged = true;
            break;
        };
        let fn_ = fn_.min(f);
        let decrease = f - fn_;
        psi = next;
        trace.push(fn_);
        f = fn_;
        if decrease <= cfg.em_tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let (active_gating, active_experts) = masks(&psi);
    let nll_value = nll(&psi, data)?;
    Ok(FitResult {
        penalized_l1: psi.penalized_l1(),
        params: psi,
        final_penalized_nll: f,
        penalized_nll_trace: trace,
        nll: nll_value,
        lambda: mode.lambda(),
        ball_radius: match mode {
            Mode::Ball(m) => Some(m),
            Mode::Lasso(_) => None,
        },
        active_gating,
        active_experts,
        converged,
        iterations,
        restart,
    })
}

fn fit_restarts(data: &Dataset<f64>, k: usize, bounds: &ParameterBounds<f64>, mode: Mode, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    bounds.validate()?;
    if k == 0 {
        return Err(SgameError::InvalidConfig("K must be at least 1".into()));
    }
    if data.n() < k {
        return Err(SgameError::InvalidDataset(format!("need n >= K, got n = {} and K = {k}", data.n())));
    }
    let bounds = bounds.with_k(k);
    let results: Vec<Result<FitResult>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| fit_one(data, &bounds, mode, cfg, r).map_err(|e| e.with_restart(r)))
        .collect();
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for res in results {
        match res {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.final_penalized_nll < b.final_penalized_nll) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                log::debug!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) if cfg.restarts == 1 => Err(e),
        (None, e) => Err(SgameError::AllRestartsFailed {
            restarts: cfg.restarts,
            first: e.map(|e| e.to_string()).unwrap_or_default(),
        }),
    }
}

/// The Lasso estimator: minimizes −(1/n)Σ ln s_ψ(y_i|x_i) + λ‖ψ^{[1,2]}‖₁
/// over the bounded class, best of `cfg.restarts` EM runs.
pub fn fit_lasso(data: &Dataset<f64>, k: usize, lambda: f64, bounds: &ParameterBounds<f64>, cfg: &FitConfig) -> Result<FitResult> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(SgameError::NegativeLambda(lambda));
    }
    fit_restarts(data, k, bounds, Mode::Lasso(lambda), cfg)
}

/// Penalized EM started at `init` instead of the usual initialization; a
/// single run, no restarts. From a fixed point the trace has length two.
pub fn fit_lasso_from(data: &Dataset<f64>, init: &SgameParams<f64>, lambda: f64, cfg: &FitConfig) -> Result<FitResult> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(SgameError::NegativeLambda(lambda));
    }
    cfg.validate()?;
    check_data(init, data)?;
    init.check_bounds()?;
    run_em(data, init.clone(), Mode::Lasso(lambda), cfg, 0)
}

/// Maximum likelihood over {‖ψ^{[1,2]}‖₁ ≤ m} within the bounded class.
pub fn fit_ball_constrained(data: &Dataset<f64>, k: usize, m: usize, bounds: &ParameterBounds<f64>, cfg: &FitConfig) -> Result<FitResult> {
    if m == 0 {
        return Err(SgameError::InvalidConfig("ball radius m must be at least 1".into()));
    }
    fit_restarts(data, k, bounds, Mode::Ball(m), cfg)
}

/// Fits over a grid of l1 radii and the radius chosen by the penalized criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallSelection {
    pub m_hat: usize,
    /// Position of `m_hat` in `m_grid`.
    pub index: usize,
    pub lambda: f64,
    pub eta: f64,
    pub m_grid: Vec<usize>,
    /// crit(m) = nll(m) + λ·m, aligned with `m_grid`.
    pub criteria: Vec<f64>,
    pub fits: Vec<FitResult>,
}

impl BallSelection {
    pub fn fit(&self) -> &FitResult {
        &self.fits[self.index]
    }
}

/// Selects m̂ as the smallest grid radius whose criterion nll(m) + λ·m is
/// within η of the grid minimum.
pub fn select_ball(
    data: &Dataset<f64>,
    k: usize,
    m_grid: &[usize],
    lambda: f64,
    eta: f64,
    bounds: &ParameterBounds<f64>,
    cfg: &FitConfig,
) -> Result<BallSelection> {
    if m_grid.is_empty() || m_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SgameError::InvalidConfig("m_grid must be nonempty and strictly increasing".into()));
    }
    if lambda < 0.0 || lambda.is_nan() {
        return Err(SgameError::NegativeLambda(lambda));
    }
    if !(eta >= 0.0) {
        return Err(SgameError::InvalidConfig(format!("eta must be nonnegative, got {eta}")));
    }
    let fits: Vec<FitResult> = m_grid
        .par_iter()
        .map(|&m| fit_ball_constrained(data, k, m, bounds, cfg))
        .collect::<Result<_>>()?;
    let criteria: Vec<f64> = fits.iter().zip(m_grid).map(|(f, &m)| f.nll + lambda * m as f64).collect();
    let min = criteria.iter().copied().fold(f64::INFINITY, f64::min);
    let index = criteria.iter().position(|&c| c <= min + eta).unwrap_or(0);
    Ok(BallSelection {
        m_hat: m_grid[index],
        index,
        lambda,
        eta,
        m_grid: m_grid.to_vec(),
        criteria,
        fits,
    })
}
