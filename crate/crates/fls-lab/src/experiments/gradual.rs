//! Gradual prune / fine-tune comparison on the toy task, following an
//! exponential sparsity schedule: the amortized-inverse method (natural
//! gradient fine-tuning with interleaved auxiliary refinement) against
//! magnitude pruning with SGD fine-tuning and the exact re-inverting oracle.

use std::collections::BTreeMap;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use fls_core::aux::AuxConfig;
use fls_core::baselines::{exact_fls_oracle_prune, magnitude_scores};
use fls_core::fisher::{LinearTask, SpectralFisher, Spectrum};
use fls_core::prune::{
    gradual_prune, select_unstructured, select_nm, GradualConfig, ModelState, Phase, PruneRow,
    PruneTrace, SparsityPattern, SparsitySchedule,
};
use fls_core::qparam::QFull;

use super::{par_map, RunContext};
use crate::config::{parse_pattern, GradualCfg};
use crate::plot::{self, PlotSpec, Scale};
use crate::record::{self, f, i, s, CsvCell, CsvTable};
use crate::stats;

const EXPERIMENT: &str = "gradual";

#[derive(Debug)]
pub struct Outcome {
    /// `method -> (seed, trace)`.
    pub traces: BTreeMap<String, Vec<(u64, PruneTrace)>>,
    pub summary: String,
}

fn make_task(cfg: &GradualCfg, seed: u64) -> Result<LinearTask> {
    let spectrum = Spectrum::from_str(&cfg.spectrum).map_err(|e| anyhow!("{e}"))?;
    let cov = SpectralFisher::new(cfg.n, &spectrum, cfg.gamma, seed).map_err(|e| anyhow!("{e}"))?;
    LinearTask::new(cov, cfg.noise, cfg.batch, seed).map_err(|e| anyhow!("{e}"))
}

fn schedule(cfg: &GradualCfg) -> Result<SparsitySchedule> {
    SparsitySchedule::exponential(cfg.start_sparsity, cfg.end_sparsity, cfg.prune_steps)
        .map_err(|e| anyhow!("{e}"))
}

fn fls_run(cfg: &GradualCfg, seed: u64) -> Result<PruneTrace> {
    let task = make_task(cfg, seed)?;
    let mut q = QFull::scaled_identity(cfg.n, 1.0 / cfg.gamma).map_err(|e| anyhow!("{e}"))?;
    let gc = GradualConfig {
        schedule: schedule(cfg)?,
        pattern: parse_pattern(&cfg.pattern)?,
        fine_tune_steps: cfg.fine_tune_steps,
        learning_rate: cfg.learning_rate,
        aux_steps_per_fine_tune: cfg.aux_steps_per_fine_tune,
        pretrain_steps: cfg.pretrain_steps,
        aux: AuxConfig::new(cfg.aux_eta),
    };
    gradual_prune(&task, &mut q, &gc, seed).map_err(|e| anyhow!("{e}"))
}

/// Magnitude baseline: rank by |w|, zero without compensation, fine-tune the
/// survivors with plain SGD.
fn magnitude_run(cfg: &GradualCfg, seed: u64) -> Result<PruneTrace> {
    let task = make_task(cfg, seed)?;
    let (x_test, y_test) = task.test_set(seed);
    let pattern = parse_pattern(&cfg.pattern)?;
    let mut state = ModelState::dense(task.weights().clone());
    let mut trace = PruneTrace::default();
    let start = std::time::Instant::now();
    let mut data_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(1);
    for (t, &f_t) in schedule(cfg)?.sequence().iter().enumerate().skip(1) {
        let scores = magnitude_scores(&state);
        let mask = match pattern {
            SparsityPattern::Unstructured => {
                select_unstructured(&scores, f_t, state.mask()).map_err(|e| anyhow!("{e}"))?
            }
            SparsityPattern::NM { n, m } => {
                let mut s2 = scores.clone();
                for (k, alive) in state.mask().iter().enumerate() {
                    if !alive {
                        s2[k] = f64::NEG_INFINITY;
                    }
                }
                let count = ((f_t * m as f64 + 0.5).floor() as usize).min(n);
                select_nm(&s2, count, m).map_err(|e| anyhow!("{e}"))?
            }
        };
        state = ModelState::new(state.weights().clone(), mask).map_err(|e| anyhow!("{e}"))?;
        trace.rows.push(PruneRow {
            phase: Phase::Prune,
            step: t,
            sparsity: state.sparsity(),
            test_mse: task.mse(state.weights(), &x_test, &y_test),
            aux_metric: None,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        for s2 in 1..=cfg.fine_tune_steps {
            let (x, y) = task.sample_dataset(task.batch_size(), data_seed);
            data_seed = data_seed.wrapping_add(1);
            let mut g = task.loss_gradient(state.weights(), &x, &y);
            for (k, alive) in state.mask().iter().enumerate() {
                if !alive {
                    g[k] = 0.0;
                }
            }
            let weights = state.weights() - g * cfg.baseline_learning_rate;
            state = ModelState::new(weights, state.mask().to_vec()).map_err(|e| anyhow!("{e}"))?;
            trace.rows.push(PruneRow {
                phase: Phase::FineTune,
                step: s2,
                sparsity: state.sparsity(),
                test_mse: task.mse(state.weights(), &x_test, &y_test),
                aux_metric: None,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(trace)
}

fn oracle_run(cfg: &GradualCfg, seed: u64) -> Result<PruneTrace> {
    let task = make_task(cfg, seed)?;
    exact_fls_oracle_prune(&task, &schedule(cfg)?, seed).map_err(|e| anyhow!("{e}"))
}

pub fn run(cfg: &GradualCfg, ctx: &RunContext) -> Result<Outcome> {
    let seeds = ctx.seeds_or(&cfg.seeds).to_vec();
    if seeds.is_empty() {
        bail!("gradual needs at least one seed");
    }
    let dir = record::run_dir(ctx.out.as_deref(), EXPERIMENT);

    let methods = ["fls_full", "magnitude", "exact"];
    let mut arms = Vec::new();
    for &m in &methods {
        for &seed in &seeds {
            arms.push((m, seed));
        }
    }
    let results = par_map(ctx.jobs, arms.clone(), |(method, seed)| {
        let trace = match method {
            "fls_full" => fls_run(cfg, seed)?,
            "magnitude" => magnitude_run(cfg, seed)?,
            "exact" => oracle_run(cfg, seed)?,
            _ => unreachable!(),
        };
        Ok((method, seed, trace))
    })?;

    let mut metrics = CsvTable::new(&[
        "method", "seed", "phase", "step", "sparsity", "test_mse", "aux_metric",
    ]);
    let mut timings = CsvTable::new(&["method", "seed", "phase", "step", "wall_ms"]);
    let mut traces: BTreeMap<String, Vec<(u64, PruneTrace)>> = BTreeMap::new();
    for (method, seed, trace) in results {
        for r in &trace.rows {
            metrics.row(&[
                s(method),
                i(seed as usize),
                s(r.phase.as_str()),
                i(r.step),
                f(r.sparsity),
                f(r.test_mse),
                match r.aux_metric {
                    Some(m) => f(m),
                    None => CsvCell::Empty,
                },
            ]);
            timings.row(&[s(method), i(seed as usize), s(r.phase.as_str()), i(r.step), f(r.wall_ms)]);
        }
        traces.entry(method.to_string()).or_default().push((seed, trace));
    }
    record::write_manifest(&dir, EXPERIMENT, cfg, &seeds)?;
    metrics.write(&dir.join("metrics.csv"))?;
    timings.write(&dir.join("timings.csv"))?;

    // Sparsity vs test MSE at prune steps, seed-averaged.
    let per_seed = plot::series_from_csv(
        &dir.join("metrics.csv"),
        "sparsity",
        "test_mse",
        &["method", "seed"],
        Some(("phase", "prune")),
    )?;
    let mut merged: BTreeMap<String, Vec<(f64, f64, usize)>> = BTreeMap::new();
    for sr in per_seed {
        let method = sr.label.split('/').next().unwrap().to_string();
        let entry = merged.entry(method).or_default();
        for (k, (x, y)) in sr.points.iter().enumerate() {
            if entry.len() <= k {
                entry.push((*x, 0.0, 0));
            }
            entry[k].1 += y;
            entry[k].2 += 1;
        }
    }
    let series: Vec<plot::Series> = merged
        .into_iter()
        .map(|(label, pts)| plot::Series {
            label,
            points: pts.into_iter().map(|(x, sum, c)| (x, sum / c as f64)).collect(),
        })
        .collect();
    plot::render(
        &dir.join("plots/mse_vs_sparsity.svg"),
        &PlotSpec {
            title: "Gradual pruning on the toy task",
            x_label: "sparsity",
            y_label: "test MSE",
            y_scale: Scale::Log,
            ..Default::default()
        },
        &series,
    )?;

    let mut summary = String::new();
    for &m in &methods {
        let finals: Vec<f64> = traces[m]
            .iter()
            .map(|(_, t)| t.final_mse().unwrap_or(f64::NAN))
            .collect();
        summary.push_str(&format!(
            "{:<10} final test MSE {:.5} +- {:.5}\n",
            m,
            stats::mean(&finals),
            stats::sem(&finals)
        ));
    }
    record::write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;

    Ok(Outcome { traces, summary })
}
