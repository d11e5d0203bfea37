//! The synthetic experiments, one module each, plus shared arm-running
//! machinery (thread pool, training wrapper, step-size grids).

pub mod block_compare;
pub mod estimation;
pub mod gradual;
pub mod init_dynamics;
pub mod oneshot;
pub mod precondition;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use fls_core::aux::{AuxConfig, AuxOptimizer, FvpSource};
use fls_core::qparam::QParameterization;
use fls_core::CoreError;

/// Experiment identifiers as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentId {
    InitDynamics,
    Precondition,
    Estimation,
    Oneshot,
    BlockCompare,
    Gradual,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::InitDynamics,
        ExperimentId::Precondition,
        ExperimentId::Estimation,
        ExperimentId::Oneshot,
        ExperimentId::BlockCompare,
        ExperimentId::Gradual,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::InitDynamics => "init-dynamics",
            ExperimentId::Precondition => "precondition",
            ExperimentId::Estimation => "estimation",
            ExperimentId::Oneshot => "oneshot",
            ExperimentId::BlockCompare => "block-compare",
            ExperimentId::Gradual => "gradual",
        }
    }
}

impl FromStr for ExperimentId {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|id| id.as_str() == s)
            .copied()
            .ok_or_else(|| {
                anyhow!(
                    "unknown experiment '{s}' (expected one of: {})",
                    Self::ALL.map(|i| i.as_str()).join(", ")
                )
            })
    }
}

/// Command-line overrides shared by all experiments.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
}

impl RunContext {
    pub fn seeds_or<'a>(&'a self, default: &'a [u64]) -> &'a [u64] {
        self.seeds.as_deref().unwrap_or(default)
    }
}

/// Maps ordered work items in a dedicated pool; arm failures carry their
/// index for diagnostics.
pub(crate) fn par_map<A, T, F>(jobs: Option<usize>, items: Vec<A>, f: F) -> Result<Vec<T>>
where
    A: Send,
    T: Send,
    F: Fn(A) -> Result<T> + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(|e| anyhow!("thread pool: {e}"))?;
    pool.install(|| {
        use rayon::prelude::*;
        items.into_par_iter().map(&f).collect::<Result<Vec<T>>>()
    })
}

/// One recorded point of a training curve.
#[derive(Debug, Clone)]
pub(crate) struct CurvePoint {
    pub step: usize,
    pub minibatches: usize,
    pub metric: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Outcome of one training arm; step-size grids treat divergence as an
/// infinitely bad arm rather than a run failure.
#[derive(Debug, Clone)]
pub(crate) struct TrainedArm {
    pub curve: Vec<CurvePoint>,
    pub diverged: bool,
}

impl TrainedArm {
    pub fn final_metric(&self) -> f64 {
        self.curve.last().map_or(f64::INFINITY, |p| p.metric)
    }

    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::INFINITY, |p| p.loss)
    }
}

/// Runs `steps` of auxiliary minimization, recording held-out metric and
/// loss every `record_every` steps. Divergence stops the arm early and marks
/// it instead of failing.
pub(crate) fn train_q(
    q: &mut dyn QParameterization,
    source: &mut FvpSource,
    aux_cfg: &AuxConfig,
    steps: usize,
    record_every: usize,
    seed: u64,
) -> Result<TrainedArm> {
    let start = Instant::now();
    let mut opt = AuxOptimizer::new(aux_cfg.clone(), q, seed).map_err(|e| anyhow!("{e}"))?;
    let mut curve = Vec::new();
    let record = |opt: &AuxOptimizer, q: &dyn QParameterization, source: &FvpSource, step: usize| -> Result<CurvePoint> {
        Ok(CurvePoint {
            step,
            minibatches: source.minibatches_drawn(),
            metric: opt.metric(q, source).map_err(|e| anyhow!("{e}"))?,
            loss: opt.held_out_loss(q, source).map_err(|e| anyhow!("{e}"))?,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };
    let first = record(&opt, q, source, 0)?;
    let guard = 1e6 * first.metric.abs().max(1.0);
    curve.push(first);
    for k in 1..=steps {
        match opt.step(q, source) {
            Ok(()) => {}
            Err(CoreError::Diverged { .. }) => return Ok(TrainedArm { curve, diverged: true }),
            Err(e) => bail!("training step failed: {e}"),
        }
        if k % record_every == 0 || k == steps {
            let point = record(&opt, q, source, k)?;
            let bad = !point.metric.is_finite() || point.metric.abs() > guard;
            curve.push(point);
            if bad {
                return Ok(TrainedArm { curve, diverged: true });
            }
        }
    }
    Ok(TrainedArm { curve, diverged: false })
}

/// Dispatches an experiment by id, loading its config (or defaults) and
/// returning the human-readable summary.
pub fn run_experiment(
    id: ExperimentId,
    config_path: Option<&Path>,
    ctx: &RunContext,
) -> Result<String> {
    match id {
        ExperimentId::InitDynamics => {
            let cfg = crate::config::load(config_path, id.as_str())?;
            Ok(init_dynamics::run(&cfg, ctx)?.summary)
        }
        ExperimentId::Precondition => {
            let cfg = crate::config::load(config_path, id.as_str())?;
            Ok(precondition::run(&cfg, ctx)?.summary)
        }
        ExperimentId::Estimation => {
            let cfg = crate::config::load(config_path, id.as_str())?;
            Ok(estimation::run(&cfg, ctx)?.summary)
        }
        ExperimentId::Oneshot => {
            let cfg = crate::config::load(config_path, id.as_str())?;
            Ok(oneshot::run(&cfg, ctx)?.summary)
        }
        ExperimentId::BlockCompare => {
            let cfg = crate::config::load(config_path, id.as_str())?;
            Ok(block_compare::run(&cfg, ctx)?.summary)
        }
        ExperimentId::Gradual => {
            let cfg = crate::config::load(config_path, id.as_str())?;
            Ok(gradual::run(&cfg, ctx)?.summary)
        }
    }
}
