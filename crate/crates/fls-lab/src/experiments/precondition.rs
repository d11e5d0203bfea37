//! Preconditioner ablation: auxiliary minimization on the linear-layer task
//! with the residual mapped through the current `Q` versus left as is, at a
//! fixed step budget with per-mode tuned step sizes.

use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fls_core::aux::{AuxConfig, FvpSource, PreconditionerMode};
use fls_core::fisher::{LinearTask, SpectralFisher, Spectrum};
use fls_core::qparam::QFull;

use super::{par_map, train_q, CurvePoint, RunContext};
use crate::config::PreconditionCfg;
use crate::plot::{self, PlotSpec, Scale};
use crate::record::{self, f, i, s, CsvTable};
use crate::stats;

const EXPERIMENT: &str = "precondition";

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: &'static str,
    pub eta: f64,
    pub final_metrics: Vec<f64>,
    pub mean_final_metric: f64,
}

#[derive(Debug)]
pub struct Outcome {
    pub identity: ModeResult,
    pub current_q: ModeResult,
    pub summary: String,
}

struct ArmOut {
    mode: &'static str,
    eta: f64,
    seed: u64,
    curve: Vec<CurvePoint>,
    diverged: bool,
}

fn mode_name(m: PreconditionerMode) -> &'static str {
    match m {
        PreconditionerMode::Identity => "identity",
        PreconditionerMode::CurrentQ => "current_q",
    }
}

fn run_arm(cfg: &PreconditionCfg, mode: PreconditionerMode, eta: f64, seed: u64) -> Result<ArmOut> {
    let spectrum = Spectrum::from_str(&cfg.spectrum).map_err(|e| anyhow!("{e}"))?;
    let cov = SpectralFisher::new(cfg.n, &spectrum, cfg.gamma, seed).map_err(|e| anyhow!("{e}"))?;
    let task = LinearTask::new(cov, cfg.noise, cfg.batch, seed).map_err(|e| anyhow!("{e}"))?;
    let mut q = QFull::scaled_identity(cfg.n, 1.0 / cfg.gamma).map_err(|e| anyhow!("{e}"))?;
    let mut source = FvpSource::task_minibatches(&task, seed.wrapping_add(0xf00d));
    let mut aux = AuxConfig::new(eta);
    aux.preconditioner = mode;
    let arm = train_q(&mut q, &mut source, &aux, cfg.steps, cfg.metric_every, seed)?;
    Ok(ArmOut {
        mode: mode_name(mode),
        eta,
        seed,
        curve: arm.curve,
        diverged: arm.diverged,
    })
}

pub fn run(cfg: &PreconditionCfg, ctx: &RunContext) -> Result<Outcome> {
    let seeds = ctx.seeds_or(&cfg.seeds).to_vec();
    if seeds.is_empty() || cfg.eta_grid.is_empty() {
        bail!("precondition needs seeds and a step-size grid");
    }
    let dir = record::run_dir(ctx.out.as_deref(), EXPERIMENT);

    let modes = [PreconditionerMode::Identity, PreconditionerMode::CurrentQ];
    let mut arms = Vec::new();
    for &mode in &modes {
        for &eta in &cfg.eta_grid {
            for &seed in &seeds {
                arms.push((mode, eta, seed));
            }
        }
    }
    let results = par_map(ctx.jobs, arms, |(mode, eta, seed)| run_arm(cfg, mode, eta, seed))?;

    let mut metrics = CsvTable::new(&[
        "mode",
        "eta",
        "seed",
        "step",
        "minibatches_consumed",
        "convergence_metric",
        "aux_loss",
    ]);
    let mut timings = CsvTable::new(&["mode", "eta", "seed", "step", "wall_ms"]);
    for r in &results {
        for p in &r.curve {
            metrics.row(&[
                s(r.mode),
                f(r.eta),
                i(r.seed as usize),
                i(p.step),
                i(p.minibatches),
                f(p.metric),
                f(p.loss),
            ]);
            timings.row(&[s(r.mode), f(r.eta), i(r.seed as usize), i(p.step), f(p.wall_ms)]);
        }
    }

    // Per-mode tuning by mean final loss over seeds.
    let mut tuned = Vec::new();
    for &mode in &modes {
        let name = mode_name(mode);
        let mut best: Option<(f64, f64)> = None;
        for &eta in &cfg.eta_grid {
            let arm: Vec<&ArmOut> = results
                .iter()
                .filter(|r| r.mode == name && r.eta == eta)
                .collect();
            if arm.iter().any(|r| r.diverged) {
                continue;
            }
            let losses: Vec<f64> = arm.iter().map(|r| r.curve.last().unwrap().loss).collect();
            let loss = stats::mean(&losses);
            if best.map_or(true, |(l, _)| loss < l) {
                best = Some((loss, eta));
            }
        }
        let (_, eta) = best.with_context(|| format!("all step sizes diverged for {name}"))?;
        let finals: Vec<f64> = results
            .iter()
            .filter(|r| r.mode == name && r.eta == eta)
            .map(|r| r.curve.last().unwrap().metric)
            .collect();
        tuned.push(ModeResult {
            mode: name,
            eta,
            mean_final_metric: stats::mean(&finals),
            final_metrics: finals,
        });
    }

    record::write_manifest(&dir, EXPERIMENT, cfg, &seeds)?;
    metrics.write(&dir.join("metrics.csv"))?;
    timings.write(&dir.join("timings.csv"))?;

    // Metric curves of the tuned arms.
    let mut series = Vec::new();
    for t in &tuned {
        let all = plot::series_from_csv(
            &dir.join("metrics.csv"),
            "step",
            "convergence_metric",
            &["mode", "eta", "seed"],
            None,
        )?;
        let prefix = format!("{}/{}", t.mode, t.eta);
        for sr in all {
            if sr.label.starts_with(&prefix) {
                let mut s2 = sr.clone();
                s2.label = format!("{} (seed {})", t.mode, sr.label.rsplit('/').next().unwrap());
                s2.points = s2.points.iter().map(|(x, y)| (*x, y.abs())).collect();
                series.push(s2);
            }
        }
    }
    plot::render(
        &dir.join("plots/metric.svg"),
        &PlotSpec {
            title: "Preconditioned vs plain auxiliary minimization",
            x_label: "step",
            y_label: "|convergence metric|",
            y_scale: Scale::Log,
            ..Default::default()
        },
        &series,
    )?;

    let identity = tuned[0].clone();
    let current_q = tuned[1].clone();
    let paired: Vec<f64> = identity
        .final_metrics
        .iter()
        .zip(current_q.final_metrics.iter())
        .map(|(a, b)| a - b)
        .collect();
    let summary = format!(
        "identity: eta {} mean final metric {:+.4e} (sem {:.2e})\n\
         current_q: eta {} mean final metric {:+.4e} (sem {:.2e})\n\
         paired mean improvement (identity - current_q): {:+.4e} (sem {:.2e})\n",
        identity.eta,
        identity.mean_final_metric,
        stats::sem(&identity.final_metrics),
        current_q.eta,
        current_q.mean_final_metric,
        stats::sem(&current_q.final_metrics),
        stats::mean(&paired),
        stats::sem(&paired),
    );
    record::write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;

    Ok(Outcome {
        identity,
        current_q,
        summary,
    })
}
