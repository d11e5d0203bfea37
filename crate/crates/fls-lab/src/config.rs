//! Per-experiment configuration, loadable from plain TOML key-value files.
//! Every field has a default matching the synthetic study it reproduces, so
//! an empty config runs the standard setup.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

/// Fig-style initialization comparison: two starting scales for `Q` on an
/// ill-conditioned spectrum, plain gradient descent, per-scale tuned rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitDynamicsCfg {
    pub n: usize,
    pub spectrum: String,
    pub gamma: f64,
    pub alphas: Vec<f64>,
    pub eta_grid: Vec<f64>,
    pub steps: usize,
    pub samples_per_step: usize,
    pub metric_every: usize,
    pub seeds: Vec<u64>,
    /// Eigenvalue-vs-target scatter snapshots per selected arm.
    pub snapshot_count: usize,
    /// Deterministic small-step descent used for closed-form tracking.
    pub flow_eta: f64,
    pub flow_steps: usize,
    pub flow_snapshot_every: usize,
}

impl Default for InitDynamicsCfg {
    fn default() -> Self {
        Self {
            n: 100,
            spectrum: "power:2".into(),
            gamma: 1e-3,
            alphas: vec![1.0, 1000.0],
            eta_grid: vec![1e-3, 3e-3, 6e-3, 1e-2, 2e-2, 3e-2],
            steps: 5000,
            samples_per_step: 4,
            metric_every: 100,
            seeds: seeds(3),
            snapshot_count: 5,
            flow_eta: 2e-4,
            flow_steps: 10_000,
            flow_snapshot_every: 500,
        }
    }
}

/// Preconditioner ablation on the linear-layer task.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreconditionCfg {
    pub n: usize,
    pub spectrum: String,
    pub gamma: f64,
    pub batch: usize,
    pub noise: f64,
    pub eta_grid: Vec<f64>,
    pub steps: usize,
    pub metric_every: usize,
    pub seeds: Vec<u64>,
}

impl Default for PreconditionCfg {
    fn default() -> Self {
        Self {
            n: 100,
            spectrum: "exp:10".into(),
            gamma: 0.01,
            batch: 100,
            noise: 0.1,
            eta_grid: vec![1e-2, 3e-2, 0.1, 0.3],
            steps: 2000,
            metric_every: 100,
            seeds: seeds(10),
        }
    }
}

/// Consistency (full family) and structured-estimation comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationCfg {
    pub n: usize,
    pub spectrum: String,
    pub gamma: f64,
    /// Minibatch size; one minibatch is consumed per optimization step.
    pub batch: usize,
    pub minibatches: usize,
    pub snapshot_every: usize,
    pub eta_grid_full: Vec<f64>,
    pub eta_grid_structured: Vec<f64>,
    /// Probe vectors averaged per gradient step (no extra minibatches).
    pub samples_per_step: usize,
    pub seeds: Vec<u64>,
    /// Monte-Carlo probes for the action-error curves and final values.
    pub curve_samples: usize,
    pub final_samples: usize,
    /// Kronecker structure (n_o x n_o) kron (n_c x n_c) with n_o * n_c = n.
    pub kron_outputs: usize,
    /// Block structure size (n / block_size blocks).
    pub block_size: usize,
}

impl Default for EstimationCfg {
    fn default() -> Self {
        Self {
            n: 100,
            spectrum: "exp:30".into(),
            gamma: 0.01,
            batch: 100,
            minibatches: 2000,
            snapshot_every: 100,
            eta_grid_full: vec![0.03, 0.05, 0.1],
            eta_grid_structured: vec![0.01, 0.03, 0.1],
            samples_per_step: 4,
            seeds: seeds(20),
            curve_samples: 512,
            final_samples: 4096,
            kron_outputs: 5,
            block_size: 20,
        }
    }
}

/// One-shot pruning comparison across parameterizations and baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneshotCfg {
    pub n: usize,
    pub spectrum: String,
    pub gamma: f64,
    pub batch: usize,
    pub noise: f64,
    pub block_sizes: Vec<usize>,
    pub eta_grid: Vec<f64>,
    pub train_steps: usize,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mfac_rank: usize,
}

impl Default for OneshotCfg {
    fn default() -> Self {
        Self {
            n: 100,
            spectrum: "exp:10".into(),
            gamma: 0.01,
            batch: 100,
            noise: 0.1,
            block_sizes: vec![5, 10, 20, 50],
            eta_grid: vec![0.01, 0.03, 0.1],
            train_steps: 3000,
            sparsities: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
            seeds: seeds(10),
            mfac_rank: 10,
        }
    }
}

/// Block-diagonal comparison against the Woodbury-refresh baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockCompareCfg {
    pub n: usize,
    pub spectrum: String,
    pub gamma: f64,
    pub batch: usize,
    pub noise: f64,
    pub block_sizes: Vec<usize>,
    pub sparsities: Vec<f64>,
    pub aux_steps_per_prune: usize,
    pub woodbury_gradients: usize,
    pub pretrain_steps: usize,
    pub eta: f64,
    pub seeds: Vec<u64>,
}

impl Default for BlockCompareCfg {
    fn default() -> Self {
        Self {
            n: 500,
            spectrum: "exp:10".into(),
            gamma: 0.01,
            batch: 100,
            noise: 0.1,
            block_sizes: vec![5, 10, 20, 50],
            sparsities: vec![0.2, 0.4, 0.6, 0.8, 0.9],
            aux_steps_per_prune: 20,
            woodbury_gradients: 512,
            pretrain_steps: 1500,
            eta: 0.03,
            seeds: seeds(3),
        }
    }
}

/// Gradual prune / fine-tune comparison on the toy task.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradualCfg {
    pub n: usize,
    pub spectrum: String,
    pub gamma: f64,
    pub batch: usize,
    pub noise: f64,
    pub start_sparsity: f64,
    pub end_sparsity: f64,
    pub prune_steps: usize,
    pub fine_tune_steps: usize,
    pub learning_rate: f64,
    /// SGD rate for the magnitude baseline's fine-tuning.
    pub baseline_learning_rate: f64,
    pub aux_steps_per_fine_tune: usize,
    pub pretrain_steps: usize,
    pub aux_eta: f64,
    /// "unstructured" or an "N:M" pattern like "2:4".
    pub pattern: String,
    pub seeds: Vec<u64>,
}

impl Default for GradualCfg {
    fn default() -> Self {
        Self {
            n: 100,
            spectrum: "exp:10".into(),
            gamma: 0.01,
            batch: 100,
            noise: 0.1,
            start_sparsity: 0.0,
            end_sparsity: 0.95,
            prune_steps: 10,
            fine_tune_steps: 20,
            learning_rate: 0.05,
            baseline_learning_rate: 0.5,
            aux_steps_per_fine_tune: 1,
            pretrain_steps: 1000,
            aux_eta: 0.03,
            pattern: "unstructured".into(),
            seeds: seeds(3),
        }
    }
}

/// Parses "unstructured" or "N:M" into the pruning pattern.
pub fn parse_pattern(s: &str) -> Result<fls_core::prune::SparsityPattern> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("unstructured") {
        return Ok(fls_core::prune::SparsityPattern::Unstructured);
    }
    let Some((n, m)) = s.split_once(':') else {
        bail!("pattern must be 'unstructured' or 'N:M', got '{s}'");
    };
    let n: usize = n.trim().parse().context("bad N in pattern")?;
    let m: usize = m.trim().parse().context("bad M in pattern")?;
    Ok(fls_core::prune::SparsityPattern::NM { n, m })
}

/// Loads a TOML config file into the given experiment's config type, or the
/// defaults when no path is given. An `experiment` key in the file, if
/// present, must match.
pub fn load<T: Default + for<'de> Deserialize<'de>>(
    path: Option<&Path>,
    experiment: &str,
) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().context("parsing config TOML")?;
    if let Some(exp) = table.get("experiment").and_then(|v| v.as_str()) {
        if exp != experiment {
            bail!("config is for experiment '{exp}', requested '{experiment}'");
        }
    }
    let mut table = table;
    table.remove("experiment");
    let cfg: T = toml::Value::Table(table)
        .try_into()
        .context("config does not match the experiment's schema")?;
    Ok(cfg)
}
