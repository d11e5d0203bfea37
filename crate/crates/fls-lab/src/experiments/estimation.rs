//! Inverse-curvature estimation quality in a controlled setting.
//!
//! Panel A: a full parameterization trained on stochastic Fisher-vector
//! products is consistent (Riemannian distance to the true damped inverse
//! keeps falling), while estimating the Fisher per minibatch, inverting, and
//! averaging the inverses plateaus at a persistent bias.
//!
//! Panels B-D: when the inverse is constrained to a structured family
//! (diagonal, block-diagonal, Kronecker), fitting the structure directly to
//! the inverse beats approximating the Fisher in that structure and
//! inverting, measured by the normalized action error under probes weighted
//! by the undamped inverse Fisher.

use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fls_core::aux::{AuxConfig, AuxOptimizer, FvpSource, UDistribution};
use fls_core::baselines::{EstInvAvg, StructureSpec, StructuredEstimator};
use fls_core::fisher::{SpectralFisher, Spectrum};
use fls_core::metrics::{normalized_action_error, riemannian_distance, ActionWeighting};
use fls_core::qparam::{init_scaled_identity, QKind};

use super::{par_map, RunContext};
use crate::config::EstimationCfg;
use crate::plot::{self, PlotSpec, Scale};
use crate::record::{self, f, i, s, CsvTable};
use crate::stats;

const EXPERIMENT: &str = "estimation";

#[derive(Debug)]
pub struct PanelA {
    pub eta: f64,
    /// Final Riemannian distances, one per seed.
    pub fls_final: Vec<f64>,
    pub naive_final: Vec<f64>,
    /// Last-quartile OLS slopes of distance against minibatch count.
    pub fls_slopes: Vec<f64>,
    pub naive_slopes: Vec<f64>,
}

#[derive(Debug)]
pub struct StructuredPanel {
    pub name: &'static str,
    pub eta: f64,
    /// Final normalized action errors, one per seed.
    pub fls_final: Vec<f64>,
    pub baseline_final: Vec<f64>,
}

#[derive(Debug)]
pub struct Outcome {
    pub panel_a: PanelA,
    pub panels: Vec<StructuredPanel>,
    pub summary: String,
}

fn make_fisher(cfg: &EstimationCfg, seed: u64) -> Result<SpectralFisher> {
    let spectrum = Spectrum::from_str(&cfg.spectrum).map_err(|e| anyhow!("{e}"))?;
    SpectralFisher::new(cfg.n, &spectrum, cfg.gamma, seed).map_err(|e| anyhow!("{e}"))
}

fn panel_kind(cfg: &EstimationCfg, panel: &'static str) -> (QKind, StructureSpec) {
    match panel {
        "b" => (QKind::Diagonal { n: cfg.n }, StructureSpec::Diagonal),
        "c" => (
            QKind::BlockDiagonal {
                n: cfg.n,
                block_size: cfg.block_size,
            },
            StructureSpec::Block {
                block_size: cfg.block_size,
            },
        ),
        "d" => (
            QKind::KroneckerDense {
                outputs: cfg.kron_outputs,
                inputs: cfg.n / cfg.kron_outputs,
                bias: false,
            },
            StructureSpec::Kronecker {
                n_o: cfg.kron_outputs,
                n_c: cfg.n / cfg.kron_outputs,
            },
        ),
        _ => unreachable!(),
    }
}

/// Trains the panel's parameterization for the full budget and returns the
/// final evaluation (distance for panel A, action error otherwise).
fn train_final(cfg: &EstimationCfg, panel: &'static str, eta: f64, seed: u64) -> Result<f64> {
    let fisher = make_fisher(cfg, seed)?;
    let mut source = FvpSource::fisher_minibatches(&fisher, cfg.batch, seed.wrapping_add(0xabc));
    if panel == "a" {
        let mut q = init_scaled_identity(&QKind::Full { n: cfg.n }, 1.0 / cfg.gamma)
            .map_err(|e| anyhow!("{e}"))?;
        let mut aux = AuxConfig::new(eta);
        aux.samples_per_step = cfg.samples_per_step;
        match fls_core::aux::minimize_aux(q.as_mut(), &mut source, &aux, cfg.minibatches, seed) {
            Ok(_) => {}
            Err(fls_core::CoreError::Diverged { .. }) => return Ok(f64::INFINITY),
            Err(e) => bail!("{e}"),
        }
        riemannian_distance(&q.dense(), &fisher.dense_inverse()).map_err(|e| anyhow!("{e}"))
    } else {
        let (kind, _) = panel_kind(cfg, panel);
        let mut q = init_scaled_identity(&kind, 1.0 / cfg.gamma).map_err(|e| anyhow!("{e}"))?;
        let mut aux = AuxConfig::new(eta);
        aux.samples_per_step = cfg.samples_per_step;
        aux.u_dist = UDistribution::inverse_fisher(&fisher).map_err(|e| anyhow!("{e}"))?;
        match fls_core::aux::minimize_aux(q.as_mut(), &mut source, &aux, cfg.minibatches, seed) {
            Ok(_) => {}
            Err(fls_core::CoreError::Diverged { .. }) => return Ok(f64::INFINITY),
            Err(e) => bail!("{e}"),
        }
        normalized_action_error(
            &|v| q.qv(v).unwrap(),
            &fisher,
            ActionWeighting::InverseFisher,
            cfg.final_samples,
            seed ^ 0x5ca1e,
        )
        .map_err(|e| anyhow!("{e}"))
    }
}

struct CurveRow {
    panel: &'static str,
    method: &'static str,
    seed: u64,
    minibatches: usize,
    value: f64,
}

/// Reruns the selected arm recording the evaluation at snapshot cadence,
/// alongside the matching baseline curve.
fn record_curves(
    cfg: &EstimationCfg,
    panel: &'static str,
    eta: f64,
    seed: u64,
) -> Result<(Vec<CurveRow>, f64, f64)> {
    let fisher = make_fisher(cfg, seed)?;
    let mut rows = Vec::new();
    let snaps: Vec<usize> = (1..=cfg.minibatches / cfg.snapshot_every)
        .map(|k| k * cfg.snapshot_every)
        .collect();

    if panel == "a" {
        let f_inv = fisher.dense_inverse();
        let mut q = init_scaled_identity(&QKind::Full { n: cfg.n }, 1.0 / cfg.gamma)
            .map_err(|e| anyhow!("{e}"))?;
        let mut source = FvpSource::fisher_minibatches(&fisher, cfg.batch, seed.wrapping_add(0xabc));
        let mut aux = AuxConfig::new(eta);
        aux.samples_per_step = cfg.samples_per_step;
        let mut opt = AuxOptimizer::new(aux, q.as_ref(), seed).map_err(|e| anyhow!("{e}"))?;
        let mut naive = EstInvAvg::new(cfg.n, cfg.gamma);
        let mut naive_seed = seed.wrapping_add(0xdead);
        let mut fls_final = f64::NAN;
        let mut naive_final = f64::NAN;
        for step in 1..=cfg.minibatches {
            opt.step(q.as_mut(), &mut source).map_err(|e| anyhow!("{e}"))?;
            naive
                .update(
                    &fisher
                        .sample_gradient_batch(cfg.batch, naive_seed)
                        .map_err(|e| anyhow!("{e}"))?,
                )
                .map_err(|e| anyhow!("{e}"))?;
            naive_seed = naive_seed.wrapping_add(1);
            if snaps.contains(&step) {
                let d_fls = riemannian_distance(&q.dense(), &f_inv).map_err(|e| anyhow!("{e}"))?;
                let d_naive = riemannian_distance(&naive.average().map_err(|e| anyhow!("{e}"))?, &f_inv)
                    .map_err(|e| anyhow!("{e}"))?;
                rows.push(CurveRow { panel, method: "fishleg", seed, minibatches: step, value: d_fls });
                rows.push(CurveRow { panel, method: "est_inv_avg", seed, minibatches: step, value: d_naive });
                fls_final = d_fls;
                naive_final = d_naive;
            }
        }
        Ok((rows, fls_final, naive_final))
    } else {
        let (kind, spec) = panel_kind(cfg, panel);
        let mut q = init_scaled_identity(&kind, 1.0 / cfg.gamma).map_err(|e| anyhow!("{e}"))?;
        let mut source = FvpSource::fisher_minibatches(&fisher, cfg.batch, seed.wrapping_add(0xabc));
        let mut aux = AuxConfig::new(eta);
        aux.samples_per_step = cfg.samples_per_step;
        aux.u_dist = UDistribution::inverse_fisher(&fisher).map_err(|e| anyhow!("{e}"))?;
        let mut opt = AuxOptimizer::new(aux, q.as_ref(), seed).map_err(|e| anyhow!("{e}"))?;
        let mut baseline = StructuredEstimator::new(cfg.n, spec, cfg.gamma).map_err(|e| anyhow!("{e}"))?;
        let mut base_seed = seed.wrapping_add(0xbeef);
        for step in 1..=cfg.minibatches {
            opt.step(q.as_mut(), &mut source).map_err(|e| anyhow!("{e}"))?;
            baseline
                .update(
                    &fisher
                        .sample_gradient_batch(cfg.batch, base_seed)
                        .map_err(|e| anyhow!("{e}"))?,
                )
                .map_err(|e| anyhow!("{e}"))?;
            base_seed = base_seed.wrapping_add(1);
            if snaps.contains(&step) {
                let samples = if step == cfg.minibatches {
                    cfg.final_samples
                } else {
                    cfg.curve_samples
                };
                let e_fls = normalized_action_error(
                    &|v| q.qv(v).unwrap(),
                    &fisher,
                    ActionWeighting::InverseFisher,
                    samples,
                    seed ^ 0x5ca1e,
                )
                .map_err(|e| anyhow!("{e}"))?;
                let inv = baseline.inverse().map_err(|e| anyhow!("{e}"))?;
                let e_base = normalized_action_error(
                    &|v| inv.apply(v).unwrap(),
                    &fisher,
                    ActionWeighting::InverseFisher,
                    samples,
                    seed ^ 0x5ca1e,
                )
                .map_err(|e| anyhow!("{e}"))?;
                rows.push(CurveRow { panel, method: "fishleg", seed, minibatches: step, value: e_fls });
                rows.push(CurveRow { panel, method: "approx_invert", seed, minibatches: step, value: e_base });
            }
        }
        let last_fls = rows.iter().rev().find(|r| r.method == "fishleg").unwrap().value;
        let last_base = rows.iter().rev().find(|r| r.method == "approx_invert").unwrap().value;
        Ok((rows, last_fls, last_base))
    }
}

/// Picks the grid step size with the best mean final evaluation over seeds.
fn tune(
    cfg: &EstimationCfg,
    panel: &'static str,
    grid: &[f64],
    seeds: &[u64],
    jobs: Option<usize>,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut arms = Vec::new();
    for &eta in grid {
        for &seed in seeds {
            arms.push((eta, seed));
        }
    }
    let finals = par_map(jobs, arms.clone(), |(eta, seed)| {
        Ok((eta, train_final(cfg, panel, eta, seed)?))
    })?;
    let mut by_eta = Vec::new();
    for &eta in grid {
        let vals: Vec<f64> = finals
            .iter()
            .filter(|(e, _)| *e == eta)
            .map(|(_, v)| *v)
            .collect();
        by_eta.push((eta, stats::mean(&vals)));
    }
    let best = by_eta
        .iter()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .context("all step sizes diverged")?;
    Ok((best.0, by_eta))
}

pub fn run(cfg: &EstimationCfg, ctx: &RunContext) -> Result<Outcome> {
    let seeds = ctx.seeds_or(&cfg.seeds).to_vec();
    if seeds.is_empty() {
        bail!("estimation needs at least one seed");
    }
    if cfg.n % cfg.block_size != 0 || cfg.n % cfg.kron_outputs != 0 {
        bail!("structure sizes must divide n");
    }
    let dir = record::run_dir(ctx.out.as_deref(), EXPERIMENT);

    let mut metrics = CsvTable::new(&["panel", "method", "seed", "minibatches_consumed", "value"]);
    let mut arms_table = CsvTable::new(&["panel", "eta", "mean_final_value"]);

    // Panel A.
    let (eta_a, grid_a) = tune(cfg, "a", &cfg.eta_grid_full, &seeds, ctx.jobs)?;
    for (eta, v) in &grid_a {
        arms_table.row(&[s("a"), f(*eta), f(*v)]);
    }
    let curves = par_map(ctx.jobs, seeds.clone(), |seed| record_curves(cfg, "a", eta_a, seed))?;
    let mut fls_final = Vec::new();
    let mut naive_final = Vec::new();
    let mut fls_slopes = Vec::new();
    let mut naive_slopes = Vec::new();
    for (rows, ff, nf) in &curves {
        fls_final.push(*ff);
        naive_final.push(*nf);
        for method in ["fishleg", "est_inv_avg"] {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.method == method)
                .map(|r| (r.minibatches as f64, r.value))
                .collect();
            let q4 = pts.len() - pts.len() / 4;
            let tail = &pts[q4.min(pts.len() - 2)..];
            let xs: Vec<f64> = tail.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = tail.iter().map(|p| p.1).collect();
            let slope = stats::ols_slope(&xs, &ys);
            if method == "fishleg" {
                fls_slopes.push(slope);
            } else {
                naive_slopes.push(slope);
            }
        }
        for r in rows {
            metrics.row(&[s(r.panel), s(r.method), i(r.seed as usize), i(r.minibatches), f(r.value)]);
        }
    }
    let panel_a = PanelA {
        eta: eta_a,
        fls_final,
        naive_final,
        fls_slopes,
        naive_slopes,
    };

    // Panels B-D.
    let mut panels = Vec::new();
    for (panel, name) in [("b", "diagonal"), ("c", "block"), ("d", "kronecker")] {
        let (eta, grid) = tune(cfg, panel, &cfg.eta_grid_structured, &seeds, ctx.jobs)?;
        for (e, v) in &grid {
            arms_table.row(&[s(panel), f(*e), f(*v)]);
        }
        let curves = par_map(ctx.jobs, seeds.clone(), |seed| record_curves(cfg, panel, eta, seed))?;
        let mut fls = Vec::new();
        let mut base = Vec::new();
        for (rows, ff, bf) in &curves {
            fls.push(*ff);
            base.push(*bf);
            for r in rows {
                metrics.row(&[s(r.panel), s(r.method), i(r.seed as usize), i(r.minibatches), f(r.value)]);
            }
        }
        panels.push(StructuredPanel {
            name,
            eta,
            fls_final: fls,
            baseline_final: base,
        });
    }

    record::write_manifest(&dir, EXPERIMENT, cfg, &seeds)?;
    metrics.write(&dir.join("metrics.csv"))?;
    arms_table.write(&dir.join("arms.csv"))?;

    // Plots: one file per panel, seed-mean curves per method.
    for (panel, ylab, title) in [
        ("a", "Riemannian distance", "Consistency vs estimate-invert-average"),
        ("b", "normalized action error", "Diagonal structure"),
        ("c", "normalized action error", "Block-diagonal structure"),
        ("d", "normalized action error", "Kronecker structure"),
    ] {
        let per_seed = plot::series_from_csv(
            &dir.join("metrics.csv"),
            "minibatches_consumed",
            "value",
            &["method", "seed"],
            Some(("panel", panel)),
        )?;
        // Average series with the same method over seeds.
        let mut merged: std::collections::BTreeMap<String, Vec<(f64, Vec<f64>)>> = Default::default();
        for sr in per_seed {
            let method = sr.label.split('/').next().unwrap().to_string();
            let entry = merged.entry(method).or_insert_with(|| {
                sr.points.iter().map(|(x, _)| (*x, Vec::new())).collect()
            });
            for (k, (_, y)) in sr.points.iter().enumerate() {
                if k < entry.len() {
                    entry[k].1.push(*y);
                }
            }
        }
        let series: Vec<plot::Series> = merged
            .into_iter()
            .map(|(label, pts)| plot::Series {
                label,
                points: pts
                    .into_iter()
                    .map(|(x, ys)| (x, stats::mean(&ys)))
                    .collect(),
            })
            .collect();
        plot::render(
            &dir.join(format!("plots/panel_{panel}.svg")),
            &PlotSpec {
                title,
                x_label: "minibatches consumed",
                y_label: ylab,
                y_scale: Scale::Log,
                ..Default::default()
            },
            &series,
        )?;
    }

    let mut summary = format!(
        "panel a (eta {}): fishleg final distance {:.4} +- {:.4}, est-inv-avg {:.4} +- {:.4}\n\
         panel a slopes: fishleg {:+.3e} +- {:.1e}, est-inv-avg {:+.3e} +- {:.1e}\n",
        panel_a.eta,
        stats::mean(&panel_a.fls_final),
        stats::sem(&panel_a.fls_final),
        stats::mean(&panel_a.naive_final),
        stats::sem(&panel_a.naive_final),
        stats::mean(&panel_a.fls_slopes),
        stats::sem(&panel_a.fls_slopes),
        stats::mean(&panel_a.naive_slopes),
        stats::sem(&panel_a.naive_slopes),
    );
    for p in &panels {
        summary.push_str(&format!(
            "panel {} (eta {}): fishleg {:.4} +- {:.4} vs approx-then-invert {:.4} +- {:.4}\n",
            p.name,
            p.eta,
            stats::mean(&p.fls_final),
            stats::sem(&p.fls_final),
            stats::mean(&p.baseline_final),
            stats::sem(&p.baseline_final),
        ));
    }
    record::write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;

    Ok(Outcome {
        panel_a,
        panels,
        summary,
    })
}
