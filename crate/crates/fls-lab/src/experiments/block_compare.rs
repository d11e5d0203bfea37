//! Block-diagonal inverse estimation during pruning: a block parameterization
//! refined with a few auxiliary steps per prune step, against per-block
//! Woodbury inverses rebuilt from a fresh gradient batch at every step.
//! Records test MSE, the Riemannian distance between the masked estimated
//! inverse and the true masked inverse, and per-step work.

use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use fls_core::aux::{AuxConfig, AuxOptimizer, FvpSource};
use fls_core::baselines::WoodburyBlockInverse;
use fls_core::fisher::{LinearTask, SpectralFisher, Spectrum};
use fls_core::metrics::masked_riemannian_distance;
use fls_core::prune::{obs_scores, obs_update, obs_update_with, select_unstructured, ModelState};
use fls_core::qparam::{QBlockDiagonal, QParameterization};
use nalgebra::DVector;

use super::{par_map, RunContext};
use crate::config::BlockCompareCfg;
use crate::plot::{self, PlotSpec, Scale};
use crate::record::{self, f, i, s, CsvTable};
use crate::stats;

const EXPERIMENT: &str = "block-compare";

/// One recorded pruning step of one arm.
#[derive(Debug, Clone)]
pub struct StepRow {
    pub method: String,
    pub block_size: usize,
    pub seed: u64,
    pub step: usize,
    pub sparsity: f64,
    pub test_mse: f64,
    pub masked_distance: f64,
    pub wall_ms: f64,
    /// Deterministic estimation-work proxy (multiply-accumulates).
    pub work: u64,
}

#[derive(Debug)]
pub struct Outcome {
    pub rows: Vec<StepRow>,
    pub block_sizes: Vec<usize>,
    pub sparsities: Vec<f64>,
    pub summary: String,
}

fn make_task(cfg: &BlockCompareCfg, seed: u64) -> Result<LinearTask> {
    let spectrum = Spectrum::from_str(&cfg.spectrum).map_err(|e| anyhow!("{e}"))?;
    let cov = SpectralFisher::new(cfg.n, &spectrum, cfg.gamma, seed).map_err(|e| anyhow!("{e}"))?;
    LinearTask::new(cov, cfg.noise, cfg.batch, seed).map_err(|e| anyhow!("{e}"))
}

fn fls_arm(cfg: &BlockCompareCfg, block_size: usize, seed: u64) -> Result<Vec<StepRow>> {
    let task = make_task(cfg, seed)?;
    let mut q = QBlockDiagonal::scaled_identity(cfg.n, block_size, 1.0 / cfg.gamma)
        .map_err(|e| anyhow!("{e}"))?;
    let mut source = FvpSource::task_minibatches(&task, seed.wrapping_add(0xb10c));
    let aux = AuxConfig::new(cfg.eta);
    let mut opt = AuxOptimizer::new(aux, &q, seed).map_err(|e| anyhow!("{e}"))?;
    let start = Instant::now();
    opt.run(&mut q, &mut source, cfg.pretrain_steps)
        .map_err(|e| anyhow!("{e}"))?;

    let (x_test, y_test) = task.test_set(seed);
    let mut state = ModelState::dense(task.weights().clone());
    let mut rows = Vec::new();
    // Work proxy: one qv product costs about n * block_size multiplies; each
    // auxiliary sample performs ~4 of them plus the vjp.
    let step_work = (6 * cfg.n * block_size) as u64;
    let mut work = cfg.pretrain_steps as u64 * step_work;
    for (t, &f_t) in cfg.sparsities.iter().enumerate() {
        let scores = obs_scores(&state, &q.diag()).map_err(|e| anyhow!("{e}"))?;
        let mask = select_unstructured(&scores, f_t, state.mask()).map_err(|e| anyhow!("{e}"))?;
        let set: Vec<usize> = (0..cfg.n)
            .filter(|&k| state.mask()[k] && !mask[k])
            .collect();
        state = obs_update(&state, &q, &set).map_err(|e| anyhow!("{e}"))?;
        source.set_mask(state.mask().to_vec());
        for _ in 0..cfg.aux_steps_per_prune {
            opt.step(&mut q, &mut source).map_err(|e| anyhow!("{e}"))?;
        }
        work += cfg.aux_steps_per_prune as u64 * step_work;
        let distance = masked_riemannian_distance(&q.dense(), task.fisher(), state.mask())
            .map_err(|e| anyhow!("{e}"))?;
        rows.push(StepRow {
            method: format!("fls_b{block_size}"),
            block_size,
            seed,
            step: t + 1,
            sparsity: state.sparsity(),
            test_mse: task.mse(state.weights(), &x_test, &y_test),
            masked_distance: distance,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            work,
        });
    }
    Ok(rows)
}

fn woodbury_arm(cfg: &BlockCompareCfg, block_size: usize, seed: u64) -> Result<Vec<StepRow>> {
    let task = make_task(cfg, seed)?;
    let (x_test, y_test) = task.test_set(seed);
    let mut state = ModelState::dense(task.weights().clone());
    let mut rows = Vec::new();
    let start = Instant::now();
    let mut batch_seed = seed.wrapping_add(0x70_0d);
    let mut work = 0u64;
    for (t, &f_t) in cfg.sparsities.iter().enumerate() {
        // Fresh gradients for the masked model, rebuilt from scratch.
        let batch = task
            .sample_gradient_batch_sized(cfg.woodbury_gradients, batch_seed)
            .masked(state.mask());
        batch_seed = batch_seed.wrapping_add(1);
        let w = WoodburyBlockInverse::from_batch(cfg.n, block_size, cfg.gamma, &batch)
            .map_err(|e| anyhow!("{e}"))?;
        work += w.work();
        let raw_diag = w.inverse_diag();
        let diag = DVector::from_fn(cfg.n, |k, _| if state.mask()[k] { raw_diag[k] } else { 1.0 });
        let scores = obs_scores(&state, &diag).map_err(|e| anyhow!("{e}"))?;
        let mask = select_unstructured(&scores, f_t, state.mask()).map_err(|e| anyhow!("{e}"))?;
        let set: Vec<usize> = (0..cfg.n)
            .filter(|&k| state.mask()[k] && !mask[k])
            .collect();
        state = obs_update_with(&state, &diag, &|v| w.apply(v), &set).map_err(|e| anyhow!("{e}"))?;

        // Distance of a freshly estimated inverse for the new mask, as the
        // method would use at the next step.
        let batch2 = task
            .sample_gradient_batch_sized(cfg.woodbury_gradients, batch_seed)
            .masked(state.mask());
        batch_seed = batch_seed.wrapping_add(1);
        let w2 = WoodburyBlockInverse::from_batch(cfg.n, block_size, cfg.gamma, &batch2)
            .map_err(|e| anyhow!("{e}"))?;
        work += w2.work();
        let distance = masked_riemannian_distance(&w2.dense(), task.fisher(), state.mask())
            .map_err(|e| anyhow!("{e}"))?;
        rows.push(StepRow {
            method: format!("woodbury_b{block_size}"),
            block_size,
            seed,
            step: t + 1,
            sparsity: state.sparsity(),
            test_mse: task.mse(state.weights(), &x_test, &y_test),
            masked_distance: distance,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            work,
        });
    }
    Ok(rows)
}

pub fn run(cfg: &BlockCompareCfg, ctx: &RunContext) -> Result<Outcome> {
    let seeds = ctx.seeds_or(&cfg.seeds).to_vec();
    if seeds.is_empty() || cfg.block_sizes.is_empty() || cfg.sparsities.is_empty() {
        bail!("block-compare needs seeds, block sizes and a sparsity grid");
    }
    for &b in &cfg.block_sizes {
        if cfg.n % b != 0 {
            bail!("block size {b} does not divide n = {}", cfg.n);
        }
    }
    let dir = record::run_dir(ctx.out.as_deref(), EXPERIMENT);

    let mut arms = Vec::new();
    for &b in &cfg.block_sizes {
        for &seed in &seeds {
            arms.push((true, b, seed));
            arms.push((false, b, seed));
        }
    }
    let results = par_map(ctx.jobs, arms, |(is_fls, b, seed)| {
        if is_fls {
            fls_arm(cfg, b, seed)
        } else {
            woodbury_arm(cfg, b, seed)
        }
    })?;
    let rows: Vec<StepRow> = results.into_iter().flatten().collect();

    let mut metrics = CsvTable::new(&[
        "method", "seed", "step", "sparsity", "test_mse", "masked_distance", "est_work",
    ]);
    let mut timings = CsvTable::new(&["method", "seed", "step", "sparsity", "wall_ms"]);
    for r in &rows {
        metrics.row(&[
            s(r.method.clone()),
            i(r.seed as usize),
            i(r.step),
            f(r.sparsity),
            f(r.test_mse),
            f(r.masked_distance),
            i(r.work as usize),
        ]);
        timings.row(&[
            s(r.method.clone()),
            i(r.seed as usize),
            i(r.step),
            f(r.sparsity),
            f(r.wall_ms),
        ]);
    }
    record::write_manifest(&dir, EXPERIMENT, cfg, &seeds)?;
    metrics.write(&dir.join("metrics.csv"))?;
    timings.write(&dir.join("timings.csv"))?;

    // Plots per block size: masked distance and test MSE vs sparsity.
    for &b in &cfg.block_sizes {
        for (col, ylab, stem) in [
            ("masked_distance", "masked Riemannian distance", "distance"),
            ("test_mse", "test MSE", "mse"),
        ] {
            let per_seed = plot::series_from_csv(
                &dir.join("metrics.csv"),
                "sparsity",
                col,
                &["method", "seed"],
                None,
            )?;
            let mut merged: std::collections::BTreeMap<String, Vec<(f64, f64, usize)>> =
                Default::default();
            for sr in per_seed {
                let method = sr.label.split('/').next().unwrap().to_string();
                if !method.ends_with(&format!("_b{b}")) {
                    continue;
                }
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
                &dir.join(format!("plots/{stem}_b{b}.svg")),
                &PlotSpec {
                    title: "Block inverse quality during pruning",
                    x_label: "sparsity",
                    y_label: ylab,
                    y_scale: Scale::Log,
                    ..Default::default()
                },
                &series,
            )?;
        }
    }

    let mut summary = String::new();
    for &b in &cfg.block_sizes {
        for (k, &f_t) in cfg.sparsities.iter().enumerate() {
            let grab = |m: &str| -> Vec<f64> {
                rows.iter()
                    .filter(|r| r.method == m && r.step == k + 1)
                    .map(|r| r.masked_distance)
                    .collect()
            };
            let fls = grab(&format!("fls_b{b}"));
            let wood = grab(&format!("woodbury_b{b}"));
            summary.push_str(&format!(
                "b={b:<3} sparsity {f_t:.2}: fls distance {:.3} +- {:.3}, woodbury {:.3} +- {:.3}\n",
                stats::mean(&fls),
                stats::sem(&fls),
                stats::mean(&wood),
                stats::sem(&wood),
            ));
        }
    }
    record::write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;

    Ok(Outcome {
        rows,
        block_sizes: cfg.block_sizes.clone(),
        sparsities: cfg.sparsities.clone(),
        summary,
    })
}
