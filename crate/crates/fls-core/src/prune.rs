//! OBS-style scoring and compensated weight deletion, mask selection, and
//! the gradual prune / fine-tune / refine loop.
//!
//! Importance of an alive weight is `rho_i = w_i^2 / (2 [Q]_ii)` (the exact
//! loss increase of the optimally compensated single deletion under the
//! quadratic model), and deletion of weight `i` applies
//! `dw = -(w_i / [Q]_ii) Q e_i`. Multi-weight deletions sum the independent
//! single-weight compensations; by linearity of `Qv` this is one product.

use std::time::Instant;

use nalgebra::DVector;

use crate::aux::{AuxConfig, AuxOptimizer, FvpSource};
use crate::error::{CoreError, Result};
use crate::fisher::LinearTask;
use crate::qparam::QParameterization;

/// Weight vector plus its binary mask (`true` = alive). Pruned coordinates
/// hold exact zeros.
#[derive(Debug, Clone)]
pub struct ModelState {
    weights: DVector<f64>,
    mask: Vec<bool>,
}

impl ModelState {
    /// Fully dense state.
    pub fn dense(weights: DVector<f64>) -> Self {
        let mask = vec![true; weights.len()];
        Self { weights, mask }
    }

    pub fn new(mut weights: DVector<f64>, mask: Vec<bool>) -> Result<Self> {
        if weights.len() != mask.len() {
            return Err(CoreError::DimensionMismatch {
                context: "ModelState",
                expected: weights.len(),
                got: mask.len(),
            });
        }
        for (i, alive) in mask.iter().enumerate() {
            if !alive {
                weights[i] = 0.0;
            }
        }
        Ok(Self { weights, mask })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn alive_count(&self) -> usize {
        self.mask.iter().filter(|a| **a).count()
    }

    pub fn zero_count(&self) -> usize {
        self.dim() - self.alive_count()
    }

    pub fn sparsity(&self) -> f64 {
        self.zero_count() as f64 / self.dim() as f64
    }
}

/// Sentinel score for already-pruned coordinates: never selected again by
/// the lowest-score rules.
pub const PRUNED_SENTINEL: f64 = f64::INFINITY;

/// OBS importance scores `rho_i = w_i^2 / (2 qdiag_i)` on alive coordinates;
/// pruned coordinates get the sentinel.
pub fn obs_scores(state: &ModelState, qdiag: &DVector<f64>) -> Result<DVector<f64>> {
    let n = state.dim();
    if qdiag.len() != n {
        return Err(CoreError::DimensionMismatch {
            context: "obs_scores",
            expected: n,
            got: qdiag.len(),
        });
    }
    let mut scores = DVector::from_element(n, PRUNED_SENTINEL);
    for i in 0..n {
        if state.mask[i] {
            if qdiag[i] <= 0.0 {
                return Err(CoreError::NotPositiveDefinite(format!(
                    "inverse diagonal entry {i} is {:.3e}",
                    qdiag[i]
                )));
            }
            scores[i] = state.weights[i] * state.weights[i] / (2.0 * qdiag[i]);
        }
    }
    Ok(scores)
}

/// OBS deletion with compensation, generic over the inverse operator: applies
/// `dw = -sum_{i in set} (w_i / diag_i) Q e_i` (evaluated as a single `Qv`
/// product by linearity), then zeroes the pruned set exactly.
pub fn obs_update_with(
    state: &ModelState,
    qdiag: &DVector<f64>,
    apply_q: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    prune_set: &[usize],
) -> Result<ModelState> {
    let n = state.dim();
    let mut coeffs = DVector::zeros(n);
    for &i in prune_set {
        if i >= n || !state.mask[i] {
            return Err(CoreError::invalid(format!(
                "prune set entry {i} is not an alive coordinate"
            )));
        }
        if qdiag[i] <= 0.0 {
            return Err(CoreError::NotPositiveDefinite(format!(
                "[Q]_{i}{i} = {:.3e} is not positive",
                qdiag[i]
            )));
        }
        coeffs[i] = state.weights[i] / qdiag[i];
    }
    let delta = apply_q(&coeffs)?;
    let mut weights = &state.weights - delta;
    let mut mask = state.mask.clone();
    for &i in prune_set {
        mask[i] = false;
    }
    for (i, alive) in mask.iter().enumerate() {
        if !alive {
            weights[i] = 0.0;
        }
    }
    Ok(ModelState { weights, mask })
}

/// OBS deletion using a parameterized `Q`.
pub fn obs_update(
    state: &ModelState,
    q: &dyn QParameterization,
    prune_set: &[usize],
) -> Result<ModelState> {
    obs_update_with(state, &q.diag(), &|v| q.qv(v), prune_set)
}

/// Prunes enough lowest-score alive coordinates to reach
/// `ceil(target * n)` zeros; ties break toward the lowest index.
pub fn select_unstructured(
    scores: &DVector<f64>,
    target_sparsity: f64,
    mask: &[bool],
) -> Result<Vec<bool>> {
    let n = mask.len();
    if scores.len() != n {
        return Err(CoreError::DimensionMismatch {
            context: "select_unstructured",
            expected: n,
            got: scores.len(),
        });
    }
    if !(0.0..=1.0).contains(&target_sparsity) {
        return Err(CoreError::invalid("target sparsity must lie in [0, 1]"));
    }
    let current_zeros = mask.iter().filter(|a| !**a).count();
    let target_zeros = (target_sparsity * n as f64).ceil() as usize;
    if target_zeros < current_zeros {
        return Err(CoreError::invalid(format!(
            "target sparsity {target_sparsity} is below the current sparsity {}",
            current_zeros as f64 / n as f64
        )));
    }
    let extra = target_zeros - current_zeros;
    let mut alive: Vec<usize> = (0..n).filter(|i| mask[*i]).collect();
    alive.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = mask.to_vec();
    for &i in alive.iter().take(extra) {
        out[i] = false;
    }
    Ok(out)
}

/// In each consecutive block of `m` coordinates, prunes the `n_prune`
/// lowest-score entries; ties break toward the lowest index.
pub fn select_nm(scores: &DVector<f64>, n_prune: usize, m: usize) -> Result<Vec<bool>> {
    let len = scores.len();
    if m == 0 || len % m != 0 {
        return Err(CoreError::invalid(format!(
            "length {len} is not divisible by block size {m}"
        )));
    }
    if n_prune >= m {
        return Err(CoreError::invalid("N:M selection needs N < M"));
    }
    let mut mask = vec![true; len];
    for block in 0..len / m {
        let base = block * m;
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| {
            scores[base + a]
                .partial_cmp(&scores[base + b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &i in idx.iter().take(n_prune) {
            mask[base + i] = false;
        }
    }
    Ok(mask)
}

/// Exponential sparsity schedule: density decays geometrically from
/// `1 - f0` to `1 - f_end` over `steps` prune steps.
#[derive(Debug, Clone)]
pub struct SparsitySchedule {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl SparsitySchedule {
    pub fn exponential(start: f64, end: f64, steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&start) || end <= start || end >= 1.0 || steps == 0 {
            return Err(CoreError::invalid(format!(
                "invalid schedule bounds: f0 = {start}, f_end = {end}, T = {steps}"
            )));
        }
        Ok(Self { start, end, steps })
    }

    /// Sparsities `f_0 .. f_T` (length `steps + 1`, strictly increasing,
    /// `f_T = f_end` exactly):
    /// `(1 - f_t) = (1 - f_0) ((1 - f_end) / (1 - f_0))^{t/T}`.
    pub fn sequence(&self) -> Vec<f64> {
        let d0 = 1.0 - self.start;
        let ratio = (1.0 - self.end) / d0;
        (0..=self.steps)
            .map(|t| {
                if t == self.steps {
                    self.end
                } else {
                    1.0 - d0 * ratio.powf(t as f64 / self.steps as f64)
                }
            })
            .collect()
    }
}

/// Convenience wrapper over [`SparsitySchedule::sequence`].
pub fn exponential_schedule(start: f64, end: f64, steps: usize) -> Result<Vec<f64>> {
    Ok(SparsitySchedule::exponential(start, end, steps)?.sequence())
}

/// One natural-gradient fine-tune step `w <- w - eta Q g`, with pruned
/// coordinates re-zeroed after the update.
pub fn fine_tune_step(
    state: &ModelState,
    q: &dyn QParameterization,
    gradient: &DVector<f64>,
    eta: f64,
) -> Result<ModelState> {
    if gradient.len() != state.dim() {
        return Err(CoreError::DimensionMismatch {
            context: "fine_tune_step",
            expected: state.dim(),
            got: gradient.len(),
        });
    }
    let step = q.qv(gradient)?;
    let mut weights = &state.weights - step * eta;
    for (i, alive) in state.mask.iter().enumerate() {
        if !alive {
            weights[i] = 0.0;
        }
    }
    Ok(ModelState {
        weights,
        mask: state.mask.clone(),
    })
}

/// Pattern targeted by the gradual loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityPattern {
    Unstructured,
    /// Exactly `n` zeros per consecutive block of `m`.
    NM { n: usize, m: usize },
}

/// Configuration of the gradual prune / fine-tune / refine loop.
#[derive(Debug, Clone)]
pub struct GradualConfig {
    pub schedule: SparsitySchedule,
    pub pattern: SparsityPattern,
    /// Fine-tune steps after each prune step.
    pub fine_tune_steps: usize,
    /// Model learning rate for the natural-gradient update.
    pub learning_rate: f64,
    /// Auxiliary minimization steps interleaved with each fine-tune step.
    pub aux_steps_per_fine_tune: usize,
    /// Auxiliary steps before the first prune.
    pub pretrain_steps: usize,
    pub aux: AuxConfig,
}

impl GradualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CoreError::invalid("learning rate must be positive"));
        }
        if let SparsityPattern::NM { n, m } = self.pattern {
            if m == 0 || n >= m {
                return Err(CoreError::invalid("N:M pattern needs 0 <= N < M"));
            }
        }
        self.aux.validate()
    }
}

/// Loop phase attached to each recorded row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Prune,
    FineTune,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Prune => "prune",
            Phase::FineTune => "fine_tune",
        }
    }
}

/// One recorded row of a pruning run.
#[derive(Debug, Clone)]
pub struct PruneRow {
    pub phase: Phase,
    pub step: usize,
    pub sparsity: f64,
    pub test_mse: f64,
    pub aux_metric: Option<f64>,
    pub wall_ms: f64,
}

/// Full trace of a pruning run.
#[derive(Debug, Clone, Default)]
pub struct PruneTrace {
    pub rows: Vec<PruneRow>,
}

impl PruneTrace {
    pub fn final_mse(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_mse)
    }
}

/// Per-block zero count for an interim sparsity level on the way to the
/// final N:M pattern: round to nearest, monotone, capped at the final `n`.
fn nm_interim_count(f: f64, n_final: usize, m: usize) -> usize {
    ((f * m as f64 + 0.5).floor() as usize).min(n_final)
}

/// The gradual loop: for each schedule step, score via `diag(Q)`, select
/// (unstructured or N:M), delete with compensation, then alternate
/// fine-tune steps with auxiliary refinement on masked minibatches.
///
/// `Q` is expected pretrained; `pretrain_steps` runs any remaining budget
/// here before the first prune.
pub fn gradual_prune(
    task: &LinearTask,
    q: &mut dyn QParameterization,
    cfg: &GradualConfig,
    seed: u64,
) -> Result<PruneTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let (x_test, y_test) = task.test_set(seed);
    let mut state = ModelState::dense(task.weights().clone());
    let mut trace = PruneTrace::default();

    let mut source = FvpSource::task_minibatches(task, seed.wrapping_add(0x5eed));
    let mut aux = AuxOptimizer::new(cfg.aux.clone(), q, seed)?;
    if cfg.pretrain_steps > 0 {
        aux.run(q, &mut source, cfg.pretrain_steps)?;
        trace.rows.push(PruneRow {
            phase: Phase::Pretrain,
            step: 0,
            sparsity: state.sparsity(),
            test_mse: task.mse(state.weights(), &x_test, &y_test),
            aux_metric: Some(aux.metric(q, &source)?),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let targets = cfg.schedule.sequence();
    let mut data_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(1);
    for (t, &f_t) in targets.iter().enumerate().skip(1) {
        // Prune step.
        let scores = obs_scores(&state, &q.diag())?;
        let new_mask = match cfg.pattern {
            SparsityPattern::Unstructured => select_unstructured(&scores, f_t, state.mask())?,
            SparsityPattern::NM { n, m } => {
                // Already-pruned coordinates take a -inf sentinel so they are
                // re-selected in every block and the mask stays monotone.
                let mut s = scores.clone();
                for (i, alive) in state.mask().iter().enumerate() {
                    if !alive {
                        s[i] = f64::NEG_INFINITY;
                    }
                }
                select_nm(&s, nm_interim_count(f_t, n, m), m)?
            }
        };
        let prune_set: Vec<usize> = (0..state.dim())
            .filter(|&i| state.mask()[i] && !new_mask[i])
            .collect();
        state = obs_update(&state, q, &prune_set)?;
        trace.rows.push(PruneRow {
            phase: Phase::Prune,
            step: t,
            sparsity: state.sparsity(),
            test_mse: task.mse(state.weights(), &x_test, &y_test),
            aux_metric: Some(aux.metric(q, &source)?),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        // Fine-tune with interleaved auxiliary refinement on the masked model.
        source.set_mask(state.mask().to_vec());
        for s in 1..=cfg.fine_tune_steps {
            let (x, y) = task.sample_dataset(task.batch_size(), data_seed);
            data_seed = data_seed.wrapping_add(1);
            let mut g = task.loss_gradient(state.weights(), &x, &y);
            for (i, alive) in state.mask().iter().enumerate() {
                if !alive {
                    g[i] = 0.0;
                }
            }
            state = fine_tune_step(&state, q, &g, cfg.learning_rate)?;
            for _ in 0..cfg.aux_steps_per_fine_tune {
                aux.step(q, &mut source)?;
            }
            trace.rows.push(PruneRow {
                phase: Phase::FineTune,
                step: s,
                sparsity: state.sparsity(),
                test_mse: task.mse(state.weights(), &x_test, &y_test),
                aux_metric: Some(aux.metric(q, &source)?),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(trace)
}
