mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sgame::bounds::{BoundInputs, BoundsReport};
use sgame::estimator::{fit_ball_constrained, fit_lasso};
use sgame::verify::{default_bounds, run_oracle_experiment, run_suite, ExperimentConfig, LambdaPolicy, LemmaReport, VerifyConfig};
use sgame::{uniform_design, Data, Params};

use config::{load, BoundsCliConfig, FitCliConfig, Sidecar, SimulateConfig};

#[derive(Parser, Debug)]
#[command(name = "sgame", version, about = "Soft-max gated mixture of Gaussian experts: simulate, fit, bound, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent (simulate defaults to data.csv).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of mixture components.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// l1 radius for a ball-constrained fit.
    #[arg(long, global = true)]
    ball_m: Option<usize>,
    #[arg(long, global = true)]
    kappa: Option<f64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from ψ₀; writes CSV plus a JSON sidecar.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Lasso (--lambda) or l1-ball (--ball-m) fit of a CSV dataset.
    Fit {
        /// CSV with header x1..xp,y1..yq.
        data: Option<PathBuf>,
    },
    /// Constants of the oracle inequality as JSON.
    Bounds {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        q: Option<usize>,
        /// Accept κ < 148; the report is then flagged as outside the theorem.
        #[arg(long)]
        allow_small_kappa: bool,
    },
    /// Run lemma suites; exits 1 if any of them fails.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        /// Trials for the gradient, product and Weyl suites.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// The oracle-inequality experiment; writes the per-(n, λ) CSV.
    Experiment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    Gradient,
    Tail,
    Entropy,
    Product,
    Weyl,
    Em,
    Oracle,
    All,
}

impl Suite {
    fn names(self) -> Vec<&'static str> {
        match self {
            Suite::Gradient => vec!["gradient"],
            Suite::Tail => vec!["tail"],
            Suite::Entropy => vec!["entropy"],
            Suite::Product => vec!["product"],
            Suite::Weyl => vec!["weyl"],
            Suite::Em => vec!["em"],
            Suite::Oracle => vec!["oracle"],
            Suite::All => sgame::verify::SUITES.to_vec(),
        }
    }
}

fn log_config<T: Serialize>(what: &str, cfg: &T) {
    match serde_json::to_string(cfg) {
        Ok(s) => log::info!("{what} config: {s}"),
        Err(e) => log::warn!("could not serialize {what} config: {e}"),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            Ok(stdout.flush()?)
        }
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn simulate(cli: &Cli, n: Option<usize>) -> Result<ExitCode> {
    let mut cfg: SimulateConfig = load(cli.config.as_deref())?;
    if let Some(n) = n {
        cfg.n = n;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let truth: Params = match &cfg.truth_file {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => cfg.truth.clone(),
    };
    truth.check_bounds().context("invalid truth")?;
    if cfg.n == 0 {
        bail!("n must be at least 1");
    }
    log_config("simulate", &cfg);
    let mut rng = sgame::verify::stream_rng(cfg.seed, 0);
    let design = uniform_design(cfg.n, truth.p(), &mut rng);
    let data = Data::simulate(&truth, design, &mut rng)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data.csv"));
    data.to_path(&out)?;
    let side = Sidecar {
        n: cfg.n,
        seed: cfg.seed,
        truth,
    };
    let side_path = sidecar_path(&out);
    fs::write(&side_path, pretty(&side)?).with_context(|| format!("writing {}", side_path.display()))?;
    log::info!("wrote {} and {}", out.display(), side_path.display());
    Ok(ExitCode::SUCCESS)
}

fn fit(cli: &Cli, data_arg: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg: FitCliConfig = load(cli.config.as_deref())?;
    if data_arg.is_some() {
        cfg.data = data_arg;
    }
    if cli.k.is_some() {
        cfg.k = cli.k;
    }
    if cli.lambda.is_some() {
        cfg.lambda = cli.lambda;
    }
    if cli.ball_m.is_some() {
        cfg.ball_m = cli.ball_m;
    }
    if let Some(s) = cli.seed {
        cfg.fit.seed = s;
    }
    let Some(path) = cfg.data.clone() else {
        bail!("no dataset given; pass a CSV path");
    };
    let data = Data::from_path(&path).with_context(|| format!("loading dataset {}", path.display()))?;
    let k = cfg.k.unwrap_or(2);
    if cfg.bounds.is_none() {
        let side = sidecar_path(&path);
        if side.exists() {
            let s: Sidecar = serde_json::from_str(&fs::read_to_string(&side)?)
                .with_context(|| format!("parsing sidecar {}", side.display()))?;
            log::info!("using the caps recorded in {}", side.display());
            cfg.bounds = Some(s.truth.bounds);
        }
    }
    let bounds = cfg.bounds.unwrap_or_else(|| default_bounds(k)).with_k(k);
    cfg.bounds = Some(bounds);
    cfg.k = Some(k);
    log_config("fit", &cfg);
    let result = match (cfg.lambda, cfg.ball_m) {
        (Some(_), Some(_)) => bail!("pass either --lambda or --ball-m, not both"),
        (Some(l), None) => fit_lasso(&data, k, l, &bounds, &cfg.fit)?,
        (None, Some(m)) => fit_ball_constrained(&data, k, m, &bounds, &cfg.fit)?,
        (None, None) => bail!("pass --lambda for a Lasso fit or --ball-m for an l1-ball fit"),
    };
    if !result.converged {
        log::warn!("EM stopped after {} iterations without meeting em_tol", result.iterations);
    }
    emit(cli.out.as_deref(), &pretty(&result)?)?;
    Ok(ExitCode::SUCCESS)
}

fn bounds(cli: &Cli, n: Option<usize>, p: Option<usize>, q: Option<usize>, allow_small: bool) -> Result<ExitCode> {
    let mut cfg: BoundsCliConfig = load(cli.config.as_deref())?;
    cfg.n = n.unwrap_or(cfg.n);
    cfg.p = p.unwrap_or(cfg.p);
    cfg.q = q.unwrap_or(cfg.q);
    cfg.k = cli.k.unwrap_or(cfg.k);
    cfg.kappa = cli.kappa.unwrap_or(cfg.kappa);
    cfg.allow_small_kappa |= allow_small;
    cfg.bounds = cfg.bounds.with_k(cfg.k);
    log_config("bounds", &cfg);
    let inputs = BoundInputs {
        n: cfg.n,
        p: cfg.p,
        q: cfg.q,
        k: cfg.k,
        bounds: cfg.bounds,
        kappa: cfg.kappa,
        m_n: cfg.m_n,
        allow_small_kappa: cfg.allow_small_kappa,
    };
    let report = BoundsReport::compute(&inputs, &cfg.m_grid)?;
    if !report.theorem_kappa {
        log::warn!("kappa = {} < 148: these constants are outside the theorem", cfg.kappa);
    }
    let bytes = pretty(&report)?;
    if let Some(out) = &cli.out {
        fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    }
    emit(None, &bytes)?;
    Ok(ExitCode::SUCCESS)
}

fn apply_experiment_flags(cli: &Cli, exp: &mut ExperimentConfig) {
    if let Some(s) = cli.seed {
        exp.seed = s;
    }
    if let Some(kappa) = cli.kappa {
        match &mut exp.lambda_policy {
            LambdaPolicy::TheoremMinimum { kappa: k } | LambdaPolicy::Grid { kappa: k, .. } => *k = kappa,
        }
    }
    if let Some(l) = cli.lambda {
        let kappa = match exp.lambda_policy {
            LambdaPolicy::TheoremMinimum { kappa } | LambdaPolicy::Grid { kappa, .. } => kappa,
        };
        exp.lambda_policy = LambdaPolicy::Grid { values: vec![l], kappa };
    }
}

fn verify(cli: &Cli, suite: Suite, trials: Option<usize>) -> Result<ExitCode> {
    let mut cfg: VerifyConfig = load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = trials {
        cfg.gradient_trials = t;
        cfg.product_trials = t;
        cfg.weyl_trials = t;
    }
    apply_experiment_flags(cli, &mut cfg.experiment);
    log_config("verify", &cfg);
    let mut reports: Vec<LemmaReport> = Vec::new();
    for name in suite.names() {
        log::info!("running suite {name}");
        reports.push(run_suite(name, &cfg)?);
    }
    let mut table = format!("{:<18} {:>8} {:>10} {:>14}  result\n", "suite", "trials", "violations", "worst_case");
    for r in &reports {
        table.push_str(&format!(
            "{:<18} {:>8} {:>10} {:>14.6e}  {}\n",
            r.suite,
            r.trials,
            r.violations,
            r.worst_case,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    let all = reports.iter().all(LemmaReport::passed);
    table.push_str(if all { "all suites passed\n" } else { "some suites FAILED\n" });
    match &cli.out {
        Some(out) => {
            fs::write(out, pretty(&reports)?).with_context(|| format!("writing {}", out.display()))?;
            emit(None, table.as_bytes())?;
        }
        None => emit(None, table.as_bytes())?,
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn experiment(cli: &Cli) -> Result<ExitCode> {
    let mut cfg: ExperimentConfig = load(cli.config.as_deref())?;
    apply_experiment_flags(cli, &mut cfg);
    log_config("experiment", &cfg);
    let report = run_oracle_experiment(&cfg)?;
    for r in &report.rows {
        log::info!(
            "n = {}: lhs = {:.4e} ± {:.1e}, rhs = {:.4e}, holds = {}",
            r.n,
            r.lhs_mean,
            r.lhs_se,
            r.rhs.total,
            r.holds
        );
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    emit(cli.out.as_deref(), &buf)?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Simulate { n } => simulate(cli, *n),
        Command::Fit { data } => fit(cli, data.clone()),
        Command::Bounds { n, p, q, allow_small_kappa } => bounds(cli, *n, *p, *q, *allow_small_kappa),
        Command::Verify { suite, trials } => verify(cli, *suite, *trials),
        Command::Experiment => experiment(cli),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SGAME_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
