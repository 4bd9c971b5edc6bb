//! JSON configs for each subcommand. Unknown keys are rejected; flags
//! override whatever the file sets.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sgame::bounds::THEOREM_KAPPA;
use sgame::estimator::FitConfig;
use sgame::verify::{default_bounds, default_truth};
use sgame::{Bounds, Params};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub seed: u64,
    /// Inline ψ₀; ignored when `truth_file` is set.
    pub truth: Params,
    pub truth_file: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n: 100,
            seed: 0,
            truth: default_truth(),
            truth_file: None,
        }
    }
}

/// Written next to a simulated CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub n: usize,
    pub seed: u64,
    pub truth: Params,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitCliConfig {
    pub data: Option<PathBuf>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub ball_m: Option<usize>,
    /// Caps of the fitted class; the data sidecar's, else the defaults.
    pub bounds: Option<Bounds>,
    pub fit: FitConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsCliConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub bounds: Bounds,
    pub kappa: f64,
    pub m_n: Option<f64>,
    pub allow_small_kappa: bool,
    pub m_grid: Vec<usize>,
}

impl Default for BoundsCliConfig {
    fn default() -> Self {
        BoundsCliConfig {
            n: 100,
            p: 10,
            q: 1,
            k: 2,
            bounds: default_bounds(2),
            kappa: THEOREM_KAPPA,
            m_n: None,
            allow_small_kappa: false,
            m_grid: vec![1, 2, 4, 8],
        }
    }
}
