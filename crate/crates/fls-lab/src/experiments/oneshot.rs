//! One-shot pruning comparison: every parameterization family is trained to
//! convergence on the linear-layer task (step size tuned per family), then
//! each method prunes the dense weights to each target sparsity in a single
//! step with OBS compensation. Baselines: magnitude (pure zeroing), a global
//! rank-limited Woodbury inverse, and the exact masked-and-inverted oracle
//! cascading over the sparsity grid.

use std::collections::BTreeMap;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fls_core::aux::{AuxConfig, FvpSource};
use fls_core::baselines::{magnitude_scores, WoodburyBlockInverse};
use fls_core::fisher::{masked_inverse, LinearTask, SpectralFisher, Spectrum};
use fls_core::prune::{obs_scores, obs_update_with, select_unstructured, ModelState};
use fls_core::qparam::{init_scaled_identity, QKind, QParameterization};
use nalgebra::DVector;

use super::{par_map, train_q, RunContext};
use crate::config::OneshotCfg;
use crate::plot::{self, PlotSpec, Scale};
use crate::record::{self, f, i, s, CsvTable};
use crate::stats;

const EXPERIMENT: &str = "oneshot";

#[derive(Debug, Clone)]
pub struct FamilyResult {
    pub name: String,
    pub eta: f64,
    pub final_losses: Vec<f64>,
    pub final_metrics: Vec<f64>,
}

#[derive(Debug)]
pub struct Outcome {
    pub families: Vec<FamilyResult>,
    /// `method -> per-sparsity mean test MSE` (aligned with `sparsities`).
    pub mse_mean: BTreeMap<String, Vec<f64>>,
    pub sparsities: Vec<f64>,
    pub summary: String,
}

fn families(cfg: &OneshotCfg) -> Vec<(String, QKind)> {
    let mut out = vec![
        ("full".to_string(), QKind::Full { n: cfg.n }),
        ("diagonal".to_string(), QKind::Diagonal { n: cfg.n }),
    ];
    for &b in &cfg.block_sizes {
        out.push((
            format!("block{b}"),
            QKind::BlockDiagonal {
                n: cfg.n,
                block_size: b,
            },
        ));
    }
    out
}

fn make_task(cfg: &OneshotCfg, seed: u64) -> Result<LinearTask> {
    let spectrum = Spectrum::from_str(&cfg.spectrum).map_err(|e| anyhow!("{e}"))?;
    let cov = SpectralFisher::new(cfg.n, &spectrum, cfg.gamma, seed).map_err(|e| anyhow!("{e}"))?;
    LinearTask::new(cov, cfg.noise, cfg.batch, seed).map_err(|e| anyhow!("{e}"))
}

fn train_family(
    cfg: &OneshotCfg,
    kind: &QKind,
    eta: f64,
    seed: u64,
) -> Result<(Box<dyn QParameterization>, f64, f64, bool)> {
    let task = make_task(cfg, seed)?;
    let mut q = init_scaled_identity(kind, 1.0 / cfg.gamma).map_err(|e| anyhow!("{e}"))?;
    let mut source = FvpSource::task_minibatches(&task, seed.wrapping_add(0xf1f0));
    let aux = AuxConfig::new(eta);
    let arm = train_q(q.as_mut(), &mut source, &aux, cfg.train_steps, cfg.train_steps, seed)?;
    Ok((q, arm.final_loss(), arm.final_metric(), arm.diverged))
}

/// One-shot prune to `target` from the dense weights, with OBS compensation
/// through the provided inverse operator.
fn one_shot_mse(
    task: &LinearTask,
    diag: &DVector<f64>,
    apply: &dyn Fn(&DVector<f64>) -> fls_core::Result<DVector<f64>>,
    scores_override: Option<&DVector<f64>>,
    target: f64,
    test_seed: u64,
) -> Result<f64> {
    let state = ModelState::dense(task.weights().clone());
    let scores = match scores_override {
        Some(s) => s.clone(),
        None => obs_scores(&state, diag).map_err(|e| anyhow!("{e}"))?,
    };
    let mask = select_unstructured(&scores, target, state.mask()).map_err(|e| anyhow!("{e}"))?;
    let set: Vec<usize> = (0..task.dim())
        .filter(|&i| state.mask()[i] && !mask[i])
        .collect();
    let after = obs_update_with(&state, diag, apply, &set).map_err(|e| anyhow!("{e}"))?;
    let (x, y) = task.test_set(test_seed);
    Ok(task.mse(after.weights(), &x, &y))
}

struct SeedRows {
    /// (method, sparsity, mse)
    prune: Vec<(String, f64, f64)>,
    /// (family, final_metric, final_loss)
    aux_final: Vec<(String, f64, f64)>,
}

fn run_seed(cfg: &OneshotCfg, tuned: &[(String, QKind, f64)], seed: u64) -> Result<SeedRows> {
    let task = make_task(cfg, seed)?;
    let mut prune = Vec::new();
    let mut aux_final = Vec::new();

    for (name, kind, eta) in tuned {
        let (q, loss, metric, diverged) = train_family(cfg, kind, *eta, seed)?;
        if diverged {
            bail!("selected arm diverged for family {name} at seed {seed}");
        }
        aux_final.push((name.clone(), metric, loss));
        let diag = q.diag();
        for &target in &cfg.sparsities {
            let mse = one_shot_mse(&task, &diag, &|v| q.qv(v), None, target, seed)?;
            prune.push((name.clone(), target, mse));
        }
    }

    // Magnitude: rank by |w|, pure zeroing.
    let state = ModelState::dense(task.weights().clone());
    let mag = magnitude_scores(&state);
    let ones = DVector::from_element(cfg.n, 1.0);
    for &target in &cfg.sparsities {
        let mse = one_shot_mse(&task, &ones, &|v| Ok(v.clone()), Some(&mag), target, seed)?;
        prune.push(("magnitude".to_string(), target, mse));
    }

    // Global rank-limited Woodbury inverse from `mfac_rank` gradients.
    let batch = task.sample_gradient_batch_sized(cfg.mfac_rank, seed.wrapping_add(0x111));
    let w = WoodburyBlockInverse::from_batch(cfg.n, cfg.n, cfg.gamma, &batch)
        .map_err(|e| anyhow!("{e}"))?;
    let wdiag = w.inverse_diag();
    for &target in &cfg.sparsities {
        let mse = one_shot_mse(&task, &wdiag, &|v| w.apply(v), None, target, seed)?;
        prune.push((format!("mfac{}", cfg.mfac_rank), target, mse));
    }

    // Exact oracle: cascade over the grid, re-masking and re-inverting the
    // true damped Fisher before each step.
    let f_damped = task.fisher().dense();
    let mut state = ModelState::dense(task.weights().clone());
    let (x_test, y_test) = task.test_set(seed);
    for &target in &cfg.sparsities {
        let inv = masked_inverse(&f_damped, state.mask()).map_err(|e| anyhow!("{e}"))?;
        let diag = DVector::from_fn(cfg.n, |k, _| if state.mask()[k] { inv[(k, k)] } else { 1.0 });
        let scores = obs_scores(&state, &diag).map_err(|e| anyhow!("{e}"))?;
        let mask = select_unstructured(&scores, target, state.mask()).map_err(|e| anyhow!("{e}"))?;
        let set: Vec<usize> = (0..cfg.n)
            .filter(|&k| state.mask()[k] && !mask[k])
            .collect();
        state = obs_update_with(&state, &diag, &|v| Ok(&inv * v), &set).map_err(|e| anyhow!("{e}"))?;
        prune.push((
            "exact".to_string(),
            target,
            task.mse(state.weights(), &x_test, &y_test),
        ));
    }

    Ok(SeedRows { prune, aux_final })
}

pub fn run(cfg: &OneshotCfg, ctx: &RunContext) -> Result<Outcome> {
    let seeds = ctx.seeds_or(&cfg.seeds).to_vec();
    if seeds.is_empty() || cfg.sparsities.is_empty() {
        bail!("oneshot needs seeds and a sparsity grid");
    }
    let dir = record::run_dir(ctx.out.as_deref(), EXPERIMENT);
    let fams = families(cfg);

    // Tune each family's step size by mean final held-out loss over seeds.
    let mut tune_arms = Vec::new();
    for (name, kind) in &fams {
        for &eta in &cfg.eta_grid {
            for &seed in &seeds {
                tune_arms.push((name.clone(), kind.clone(), eta, seed));
            }
        }
    }
    let tune_out = par_map(ctx.jobs, tune_arms, |(name, kind, eta, seed)| {
        let (_, loss, _, diverged) = train_family(cfg, &kind, eta, seed)?;
        Ok((name, eta, if diverged { f64::INFINITY } else { loss }))
    })?;
    let mut arms_table = CsvTable::new(&["family", "eta", "mean_final_loss"]);
    let mut tuned = Vec::new();
    for (name, kind) in &fams {
        let mut best: Option<(f64, f64)> = None;
        for &eta in &cfg.eta_grid {
            let losses: Vec<f64> = tune_out
                .iter()
                .filter(|(n2, e2, _)| n2 == name && *e2 == eta)
                .map(|(_, _, l)| *l)
                .collect();
            let mean = stats::mean(&losses);
            arms_table.row(&[s(name.clone()), f(eta), f(mean)]);
            if mean.is_finite() && best.map_or(true, |(l, _)| mean < l) {
                best = Some((mean, eta));
            }
        }
        let (_, eta) = best.with_context(|| format!("all step sizes diverged for {name}"))?;
        tuned.push((name.clone(), kind.clone(), eta));
    }

    let per_seed = par_map(ctx.jobs, seeds.clone(), |seed| run_seed(cfg, &tuned, seed))?;

    // Persist.
    let mut metrics = CsvTable::new(&[
        "method", "seed", "phase", "step", "sparsity", "test_mse", "aux_metric",
    ]);
    let mut aux_table = CsvTable::new(&["family", "seed", "eta", "final_metric", "final_loss"]);
    for (seed, rows) in seeds.iter().zip(per_seed.iter()) {
        for (k, (method, sparsity, mse)) in rows.prune.iter().enumerate() {
            let _ = k;
            metrics.row(&[
                s(method.clone()),
                i(*seed as usize),
                s("prune"),
                i(1),
                f(*sparsity),
                f(*mse),
                crate::record::CsvCell::Empty,
            ]);
        }
        for (family, metric, loss) in &rows.aux_final {
            let eta = tuned.iter().find(|(n2, _, _)| n2 == family).unwrap().2;
            aux_table.row(&[s(family.clone()), i(*seed as usize), f(eta), f(*metric), f(*loss)]);
        }
    }
    record::write_manifest(&dir, EXPERIMENT, cfg, &seeds)?;
    metrics.write(&dir.join("metrics.csv"))?;
    aux_table.write(&dir.join("aux_final.csv"))?;
    arms_table.write(&dir.join("arms.csv"))?;

    // Aggregate.
    let mut mse_mean: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut methods: Vec<String> = fams.iter().map(|(n2, _)| n2.clone()).collect();
    methods.push("magnitude".into());
    methods.push(format!("mfac{}", cfg.mfac_rank));
    methods.push("exact".into());
    for method in &methods {
        let mut per_sparsity = Vec::new();
        for &target in &cfg.sparsities {
            let vals: Vec<f64> = per_seed
                .iter()
                .flat_map(|r| {
                    r.prune
                        .iter()
                        .filter(|(m2, t2, _)| m2 == method && *t2 == target)
                        .map(|(_, _, v)| *v)
                })
                .collect();
            per_sparsity.push(stats::mean(&vals));
        }
        mse_mean.insert(method.clone(), per_sparsity);
    }

    let mut families_out = Vec::new();
    for (name, _, eta) in &tuned {
        let losses: Vec<f64> = per_seed
            .iter()
            .flat_map(|r| {
                r.aux_final
                    .iter()
                    .filter(|(n2, _, _)| n2 == name)
                    .map(|(_, _, l)| *l)
            })
            .collect();
        let metrics_v: Vec<f64> = per_seed
            .iter()
            .flat_map(|r| {
                r.aux_final
                    .iter()
                    .filter(|(n2, _, _)| n2 == name)
                    .map(|(_, m2, _)| *m2)
            })
            .collect();
        families_out.push(FamilyResult {
            name: name.clone(),
            eta: *eta,
            final_losses: losses,
            final_metrics: metrics_v,
        });
    }

    // Plots.
    let per_method = plot::series_from_csv(
        &dir.join("metrics.csv"),
        "sparsity",
        "test_mse",
        &["method", "seed"],
        None,
    )?;
    let mut merged: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for sr in per_method {
        let method = sr.label.split('/').next().unwrap().to_string();
        for (x, y) in sr.points {
            let e = merged
                .entry(method.clone())
                .or_default()
                .entry((x * 1e6) as u64)
                .or_insert((0.0, 0));
            e.0 += y;
            e.1 += 1;
        }
    }
    let series: Vec<plot::Series> = merged
        .into_iter()
        .map(|(label, pts)| plot::Series {
            label,
            points: pts
                .into_iter()
                .map(|(x, (sum, c))| (x as f64 / 1e6, sum / c as f64))
                .collect(),
        })
        .collect();
    plot::render(
        &dir.join("plots/test_mse.svg"),
        &PlotSpec {
            title: "One-shot pruning performance",
            x_label: "sparsity",
            y_label: "test MSE",
            y_scale: Scale::Log,
            ..Default::default()
        },
        &series,
    )?;
    let loss_series: Vec<plot::Series> = families_out
        .iter()
        .map(|f2| plot::Series {
            label: f2.name.clone(),
            points: f2
                .final_losses
                .iter()
                .enumerate()
                .map(|(k, l)| (k as f64, *l))
                .collect(),
        })
        .collect();
    plot::render(
        &dir.join("plots/aux_loss_by_family.svg"),
        &PlotSpec {
            title: "Final auxiliary loss per family (by seed)",
            x_label: "seed index",
            y_label: "held-out auxiliary loss",
            ..Default::default()
        },
        &loss_series,
    )?;

    let mut summary = String::new();
    for f2 in &families_out {
        summary.push_str(&format!(
            "{:<10} eta {:<6} mean final loss {:+.4} (sem {:.4}), mean metric {:+.4e}\n",
            f2.name,
            f2.eta,
            stats::mean(&f2.final_losses),
            stats::sem(&f2.final_losses),
            stats::mean(&f2.final_metrics),
        ));
    }
    for method in &methods {
        let row: Vec<String> = cfg
            .sparsities
            .iter()
            .zip(mse_mean[method].iter())
            .map(|(s2, m)| format!("{s2}:{m:.4}"))
            .collect();
        summary.push_str(&format!("{:<10} mse {}\n", method, row.join(" ")));
    }
    record::write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;

    Ok(Outcome {
        families: families_out,
        mse_mean,
        sparsities: cfg.sparsities.clone(),
        summary,
    })
}
