//! Minimization of the auxiliary loss over the parameterization of `Q`.
//!
//! For a probe vector `u`, the per-sample loss is
//! `A(lambda; u) = (1/2 u'Q F_gamma Q u - u'Q u) / |u|^2`,
//! whose unique minimizer over unconstrained SPD `Q` is `F_gamma^{-1}`.
//! Convergence is monitored with the same expression with the 1/2 dropped,
//! which is exactly zero at the solution.
//!
//! Gradients reach the flat parameters through `qv_vjp`. With the
//! current-`Q` preconditioner the sampled residual is mapped through one
//! extra `Qv` product before the vector-Jacobian product, equalizing the
//! per-eigenvalue time constants of the idealized flow (see [`flow`]).

pub mod flow;

use std::cell::Cell;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::fisher::{GradientBatch, LinearTask, SpectralFisher};
use crate::linalg;
use crate::qparam::{QKind, QParameterization};

/// Distribution of auxiliary probe vectors `u`.
#[derive(Debug, Clone)]
pub enum UDistribution {
    /// `u ~ N(0, I)`; the default for pruning, where the whole parameter
    /// space matters.
    Isotropic,
    /// `u = S z` for a fixed factor `S`, i.e. `u ~ N(0, S S')`.
    CovarianceFactor(DMatrix<f64>),
    /// Draws uniformly from a provided sample set.
    FixedSet(Vec<DVector<f64>>),
}

impl UDistribution {
    /// `u ~ N(0, F^{-1})` for the undamped Fisher, via the factor
    /// `U diag(xi^{-1/2})`.
    pub fn inverse_fisher(fisher: &SpectralFisher) -> Result<Self> {
        let n = fisher.dim();
        if fisher.eigenvalues()[n - 1] <= 0.0 {
            return Err(CoreError::NotPositiveDefinite(
                "inverse-Fisher probes need an invertible undamped Fisher".into(),
            ));
        }
        let half = fisher.eigenvalues().map(|x| 1.0 / x.sqrt());
        Ok(UDistribution::CovarianceFactor(
            fisher.basis() * DMatrix::from_diagonal(&half),
        ))
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            UDistribution::Isotropic => linalg::normal_vector(n, rng),
            UDistribution::CovarianceFactor(s) => s * linalg::normal_vector(s.ncols(), rng),
            UDistribution::FixedSet(set) => set[rng.gen_range(0..set.len())].clone(),
        }
    }
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl StepRule {
    pub fn adam_default() -> Self {
        StepRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Preconditioner applied to the sampled residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreconditionerMode {
    Identity,
    /// Maps the residual through the current `Q` (one extra `Qv` product per
    /// sample).
    CurrentQ,
}

/// Configuration of one auxiliary minimization run. The step size has no
/// default: it is tuned per experiment.
#[derive(Debug, Clone)]
pub struct AuxConfig {
    pub u_dist: UDistribution,
    pub eta: f64,
    pub rule: StepRule,
    pub preconditioner: PreconditionerMode,
    pub samples_per_step: usize,
    pub metric_every: usize,
    pub metric_batch: usize,
}

impl AuxConfig {
    pub fn new(eta: f64) -> Self {
        Self {
            u_dist: UDistribution::Isotropic,
            eta,
            rule: StepRule::adam_default(),
            preconditioner: PreconditionerMode::Identity,
            samples_per_step: 1,
            metric_every: 50,
            metric_batch: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(CoreError::invalid("step size must be positive"));
        }
        if let StepRule::Adam { beta1, beta2, .. } = self.rule {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(CoreError::invalid("Adam betas must lie in [0, 1)"));
            }
        }
        if self.samples_per_step == 0 {
            return Err(CoreError::invalid("samples_per_step must be at least 1"));
        }
        if self.metric_every == 0 || self.metric_batch == 0 {
            return Err(CoreError::invalid("metric cadence and batch must be positive"));
        }
        Ok(())
    }
}

/// Fisher-vector product available during one optimization step.
pub enum StepFvp<'a> {
    Exact {
        fisher: &'a SpectralFisher,
        mask: Option<Vec<bool>>,
    },
    Batch(GradientBatch),
}

impl StepFvp<'_> {
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            StepFvp::Exact { fisher, mask: None } => fisher.fvp(v),
            StepFvp::Exact {
                fisher,
                mask: Some(m),
            } => {
                // (M F M + gamma I) v
                if v.len() != fisher.dim() {
                    return Err(CoreError::DimensionMismatch {
                        context: "masked exact fvp",
                        expected: fisher.dim(),
                        got: v.len(),
                    });
                }
                let mut mv = v.clone();
                for (i, alive) in m.iter().enumerate() {
                    if !alive {
                        mv[i] = 0.0;
                    }
                }
                let mut fv = fisher.fvp_undamped(&mv);
                for (i, alive) in m.iter().enumerate() {
                    if !alive {
                        fv[i] = 0.0;
                    }
                }
                Ok(fv + v * fisher.damping())
            }
            StepFvp::Batch(batch) => batch.empirical_fvp(v),
        }
    }
}

enum Sampler<'a> {
    Exact,
    Task(&'a LinearTask),
    Fisher { batch: usize },
}

/// Stream of Fisher-vector products for training, plus the exact reference
/// used for held-out monitoring. Minibatch variants draw one fresh gradient
/// batch per step; a mask restricts the estimated Fisher to alive
/// coordinates (damping stays full-dimensional).
pub struct FvpSource<'a> {
    fisher: &'a SpectralFisher,
    sampler: Sampler<'a>,
    mask: Option<Vec<bool>>,
    seed: u64,
    drawn: usize,
}

impl<'a> FvpSource<'a> {
    pub fn exact(fisher: &'a SpectralFisher) -> Self {
        Self {
            fisher,
            sampler: Sampler::Exact,
            mask: None,
            seed: 0,
            drawn: 0,
        }
    }

    /// Fresh score-gradient minibatches from a linear task (batch size is the
    /// task's).
    pub fn task_minibatches(task: &'a LinearTask, seed: u64) -> Self {
        Self {
            fisher: task.fisher(),
            sampler: Sampler::Task(task),
            mask: None,
            seed,
            drawn: 0,
        }
    }

    /// Fresh minibatches sampled directly from a spectral Fisher.
    pub fn fisher_minibatches(fisher: &'a SpectralFisher, batch: usize, seed: u64) -> Self {
        Self {
            fisher,
            sampler: Sampler::Fisher { batch },
            mask: None,
            seed,
            drawn: 0,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.set_mask(mask);
        self
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.fisher.dim());
        self.mask = Some(mask);
    }

    pub fn fisher(&self) -> &SpectralFisher {
        self.fisher
    }

    /// Number of gradient minibatches drawn so far.
    pub fn minibatches_drawn(&self) -> usize {
        self.drawn
    }

    /// The product used for this step's gradient; minibatch samplers draw a
    /// fresh batch.
    pub fn next_step(&mut self) -> Result<StepFvp<'a>> {
        match self.sampler {
            Sampler::Exact => Ok(StepFvp::Exact {
                fisher: self.fisher,
                mask: self.mask.clone(),
            }),
            Sampler::Task(task) => {
                let seed = self.seed.wrapping_add(self.drawn as u64);
                self.drawn += 1;
                let mut batch = task.sample_gradient_batch(seed);
                if let Some(mask) = &self.mask {
                    batch = batch.masked(mask);
                }
                Ok(StepFvp::Batch(batch))
            }
            Sampler::Fisher { batch } => {
                let seed = self.seed.wrapping_add(self.drawn as u64);
                self.drawn += 1;
                let mut b = self.fisher.sample_gradient_batch(batch, seed)?;
                if let Some(mask) = &self.mask {
                    b = b.masked(mask);
                }
                Ok(StepFvp::Batch(b))
            }
        }
    }

    /// Exact (masked) product for low-variance held-out monitoring.
    pub fn exact_op(&self) -> StepFvp<'a> {
        StepFvp::Exact {
            fisher: self.fisher,
            mask: self.mask.clone(),
        }
    }
}

/// Per-sample auxiliary loss
/// `(1/2 u'Q F_gamma Q u - u'Q u) / |u|^2`,
/// evaluated with exactly two `Qv` products and one Fisher-vector product.
pub fn aux_loss_sample(q: &dyn QParameterization, op: &StepFvp, u: &DVector<f64>) -> Result<f64> {
    let norm2 = u.norm_squared();
    if norm2 == 0.0 {
        return Err(CoreError::invalid("probe vector u must be nonzero"));
    }
    let a = q.qv(u)?;
    let b = op.apply(&a)?;
    let c = q.qv(&b)?;
    Ok((0.5 * u.dot(&c) - u.dot(&a)) / norm2)
}

/// Mean auxiliary loss over a probe batch.
pub fn aux_loss_batch(q: &dyn QParameterization, op: &StepFvp, us: &[DVector<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for u in us {
        total += aux_loss_sample(q, op, u)?;
    }
    Ok(total / us.len() as f64)
}

/// Convergence diagnostic: the auxiliary loss with the 1/2 dropped,
/// `mean_u (u'Q F_gamma Q u - u'Q u) / |u|^2`; exactly zero at
/// `Q = F_gamma^{-1}`.
pub fn convergence_metric(
    q: &dyn QParameterization,
    op: &StepFvp,
    us: &[DVector<f64>],
) -> Result<f64> {
    if us.is_empty() {
        return Err(CoreError::invalid("metric batch must be nonempty"));
    }
    let mut total = 0.0;
    for u in us {
        let norm2 = u.norm_squared();
        if norm2 == 0.0 {
            return Err(CoreError::invalid("probe vector u must be nonzero"));
        }
        let a = q.qv(u)?;
        let b = op.apply(&a)?;
        let c = q.qv(&b)?;
        total += (u.dot(&c) - u.dot(&a)) / norm2;
    }
    Ok(total / us.len() as f64)
}

/// Stochastic gradient of the auxiliary loss at one probe vector.
///
/// With `v = Qu` and residual `r = F_gamma v - u`: identity mode returns
/// `vjp(u, r) / |u|^2`; current-`Q` mode first maps `r' = Q r` (the single
/// extra product) and returns `vjp(u, r') / |u|^2`. Both are linear in the
/// Fisher-vector product, so minibatch noise enters unbiasedly.
pub fn aux_gradient(
    q: &dyn QParameterization,
    op: &StepFvp,
    u: &DVector<f64>,
    mode: PreconditionerMode,
) -> Result<DVector<f64>> {
    let norm2 = u.norm_squared();
    if norm2 == 0.0 {
        return Err(CoreError::invalid("probe vector u must be nonzero"));
    }
    let v = q.qv(u)?;
    let r = op.apply(&v)? - u;
    let residual = match mode {
        PreconditionerMode::Identity => r,
        PreconditionerMode::CurrentQ => q.qv(&r)?,
    };
    Ok(q.qv_vjp(u, &residual)? / norm2)
}

/// One row of an optimization trace.
#[derive(Debug, Clone)]
pub struct AuxTraceRow {
    pub step: usize,
    pub minibatches: usize,
    pub metric: f64,
    pub wall_ms: f64,
}

/// Held-out convergence history of a run; one row per recorded step.
#[derive(Debug, Clone, Default)]
pub struct AuxTrace {
    pub rows: Vec<AuxTraceRow>,
}

impl AuxTrace {
    pub fn final_metric(&self) -> Option<f64> {
        self.rows.last().map(|r| r.metric)
    }
}

/// Stateful auxiliary-loss optimizer. Keeping the Adam moments here lets the
/// gradual pruning loop interleave single steps with other work.
pub struct AuxOptimizer {
    cfg: AuxConfig,
    rng: ChaCha8Rng,
    metric_us: Vec<DVector<f64>>,
    adam_m: DVector<f64>,
    adam_v: DVector<f64>,
    adam_t: usize,
    steps_done: usize,
    initial_metric: Option<f64>,
    wall_ms: f64,
}

impl AuxOptimizer {
    pub fn new(cfg: AuxConfig, q: &dyn QParameterization, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = q.dim();
        // Held-out probes are isotropic and fixed for the whole run.
        let mut metric_rng = linalg::seeded_rng(seed, 40);
        let metric_us = (0..cfg.metric_batch)
            .map(|_| linalg::normal_vector(n, &mut metric_rng))
            .collect();
        let params = q.param_count();
        Ok(Self {
            cfg,
            rng: linalg::seeded_rng(seed, 41),
            metric_us,
            adam_m: DVector::zeros(params),
            adam_v: DVector::zeros(params),
            adam_t: 0,
            steps_done: 0,
            initial_metric: None,
            wall_ms: 0.0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Held-out convergence metric under the source's exact (masked) product.
    pub fn metric(&self, q: &dyn QParameterization, source: &FvpSource) -> Result<f64> {
        convergence_metric(q, &source.exact_op(), &self.metric_us)
    }

    /// Held-out auxiliary loss (with the 1/2), for comparing families whose
    /// converged metric is near zero by scale stationarity.
    pub fn held_out_loss(&self, q: &dyn QParameterization, source: &FvpSource) -> Result<f64> {
        aux_loss_batch(q, &source.exact_op(), &self.metric_us)
    }

    /// One step: draw fresh probes (and a fresh minibatch if the source is
    /// stochastic), average the sampled gradients, update the parameters.
    pub fn step(&mut self, q: &mut dyn QParameterization, source: &mut FvpSource) -> Result<()> {
        let start = Instant::now();
        let op = source.next_step()?;
        let n = q.dim();
        let mut grad = DVector::zeros(q.param_count());
        for _ in 0..self.cfg.samples_per_step {
            let u = self.cfg.u_dist.sample(n, &mut self.rng);
            grad += aux_gradient(q, &op, &u, self.cfg.preconditioner)?;
        }
        grad /= self.cfg.samples_per_step as f64;

        let mut params = q.flat_params();
        match self.cfg.rule {
            StepRule::Sgd => {
                params -= grad * self.cfg.eta;
            }
            StepRule::Adam { beta1, beta2, epsilon } => {
                self.adam_t += 1;
                self.adam_m = &self.adam_m * beta1 + &grad * (1.0 - beta1);
                self.adam_v = &self.adam_v * beta2 + grad.component_mul(&grad) * (1.0 - beta2);
                let bc1 = 1.0 - beta1.powi(self.adam_t as i32);
                let bc2 = 1.0 - beta2.powi(self.adam_t as i32);
                for k in 0..params.len() {
                    let m_hat = self.adam_m[k] / bc1;
                    let v_hat = self.adam_v[k] / bc2;
                    params[k] -= self.cfg.eta * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        q.set_flat_params(&params)?;
        self.steps_done += 1;
        self.wall_ms += start.elapsed().as_secs_f64() * 1e3;
        Ok(())
    }

    fn guard(&self) -> f64 {
        // 1e6 x the initial magnitude, floored so a near-zero start does not
        // trip the guard on noise.
        1e6 * self.initial_metric.map_or(1.0, |m| m.abs().max(1.0))
    }

    fn record(
        &mut self,
        q: &dyn QParameterization,
        source: &FvpSource,
        trace: &mut AuxTrace,
    ) -> Result<()> {
        let metric = self.metric(q, source)?;
        if self.initial_metric.is_none() {
            self.initial_metric = Some(metric);
        }
        if !metric.is_finite() || metric.abs() > self.guard() {
            return Err(CoreError::Diverged {
                step: self.steps_done,
                metric,
                guard: self.guard(),
            });
        }
        trace.rows.push(AuxTraceRow {
            step: self.steps_done,
            minibatches: source.minibatches_drawn(),
            metric,
            wall_ms: self.wall_ms,
        });
        Ok(())
    }

    /// Runs `steps` optimization steps, recording the held-out metric every
    /// `metric_every` steps (plus the initial and final states). A zero
    /// budget leaves `Q` untouched and the trace empty.
    pub fn run(
        &mut self,
        q: &mut dyn QParameterization,
        source: &mut FvpSource,
        steps: usize,
    ) -> Result<AuxTrace> {
        let mut trace = AuxTrace::default();
        if steps == 0 {
            return Ok(trace);
        }
        self.record(q, source, &mut trace)?;
        for k in 1..=steps {
            self.step(q, source)?;
            if k % self.cfg.metric_every == 0 || k == steps {
                self.record(q, source, &mut trace)?;
            }
        }
        Ok(trace)
    }
}

/// Runs the whole step budget in one call; see [`AuxOptimizer`].
pub fn minimize_aux(
    q: &mut dyn QParameterization,
    source: &mut FvpSource,
    cfg: &AuxConfig,
    steps: usize,
    seed: u64,
) -> Result<AuxTrace> {
    let mut opt = AuxOptimizer::new(cfg.clone(), q, seed)?;
    opt.run(q, source, steps)
}

/// Instrumented wrapper counting `Qv` products, used to verify operation
/// budgets (e.g. the preconditioner costs exactly one extra product per
/// sample).
pub struct CountingQ<'a> {
    inner: &'a mut dyn QParameterization,
    qv_calls: Cell<usize>,
}

impl<'a> CountingQ<'a> {
    pub fn new(inner: &'a mut dyn QParameterization) -> Self {
        Self {
            inner,
            qv_calls: Cell::new(0),
        }
    }

    pub fn qv_calls(&self) -> usize {
        self.qv_calls.get()
    }

    pub fn reset(&self) {
        self.qv_calls.set(0);
    }
}

impl QParameterization for CountingQ<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn kind(&self) -> QKind {
        self.inner.kind()
    }

    fn qv(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.qv_calls.set(self.qv_calls.get() + 1);
        self.inner.qv(v)
    }

    fn diag(&self) -> DVector<f64> {
        self.inner.diag()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn flat_params(&self) -> DVector<f64> {
        self.inner.flat_params()
    }

    fn set_flat_params(&mut self, params: &DVector<f64>) -> Result<()> {
        self.inner.set_flat_params(params)
    }

    fn qv_vjp(&self, u: &DVector<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.qv_vjp(u, r)
    }

    fn dense(&self) -> DMatrix<f64> {
        self.inner.dense()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::Spectrum;
    use crate::linalg::{max_abs, normal_vector, seeded_rng};
    use crate::qparam::{QDiagonal, QFull};

    fn fig_fisher(n: usize) -> SpectralFisher {
        SpectralFisher::new(n, &Spectrum::Power(2.0), 1e-3, 7).unwrap()
    }

    /// Q with zero action, for the degenerate-loss case.
    struct ZeroQ(usize);
    impl QParameterization for ZeroQ {
        fn dim(&self) -> usize {
            self.0
        }
        fn kind(&self) -> QKind {
            QKind::Diagonal { n: self.0 }
        }
        fn qv(&self, _v: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::zeros(self.0))
        }
        fn diag(&self) -> DVector<f64> {
            DVector::zeros(self.0)
        }
        fn param_count(&self) -> usize {
            0
        }
        fn flat_params(&self) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn set_flat_params(&mut self, _p: &DVector<f64>) -> Result<()> {
            Ok(())
        }
        fn qv_vjp(&self, _u: &DVector<f64>, _r: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(DVector::zeros(0))
        }
        fn dense(&self) -> DMatrix<f64> {
            DMatrix::zeros(self.0, self.0)
        }
    }

    #[test]
    fn loss_zero_for_zero_q() {
        let f = fig_fisher(5);
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let mut rng = seeded_rng(1, 0);
        let u = normal_vector(5, &mut rng);
        let loss = aux_loss_sample(&ZeroQ(5), &op, &u).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_at_exact_inverse_is_minus_half_quadratic() {
        let f = fig_fisher(6);
        let q = QFull::from_dense_spd(&f.dense_inverse()).unwrap();
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let mut rng = seeded_rng(2, 0);
        for _ in 0..5 {
            let u = normal_vector(6, &mut rng);
            let loss = aux_loss_sample(&q, &op, &u).unwrap();
            let expected = -0.5 * u.dot(&(f.dense_inverse() * &u)) / u.norm_squared();
            assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        }
    }

    #[test]
    fn loss_matches_dense_oracle() {
        let f = fig_fisher(5);
        let mut q = QFull::scaled_identity(5, 1.0).unwrap();
        let mut rng = seeded_rng(3, 0);
        let mut p = q.flat_params();
        for x in p.iter_mut() {
            *x += 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        q.set_flat_params(&p).unwrap();
        let qd = q.dense();
        let fd = f.dense();
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let u = normal_vector(5, &mut rng);
        let loss = aux_loss_sample(&q, &op, &u).unwrap();
        let expected =
            (0.5 * u.dot(&(&qd * &fd * &qd * &u)) - u.dot(&(&qd * &u))) / u.norm_squared();
        assert!((loss - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_rejects_zero_probe() {
        let f = fig_fisher(4);
        let q = QFull::scaled_identity(4, 1.0).unwrap();
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        assert!(aux_loss_sample(&q, &op, &DVector::zeros(4)).is_err());
    }

    #[test]
    fn metric_zero_at_solution_and_scalar_case() {
        let f = fig_fisher(8);
        let q = QFull::from_dense_spd(&f.dense_inverse()).unwrap();
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let mut rng = seeded_rng(4, 0);
        let us: Vec<DVector<f64>> = (0..16).map(|_| normal_vector(8, &mut rng)).collect();
        let m = convergence_metric(&q, &op, &us).unwrap();
        assert!(m.abs() < 1e-8, "metric at solution {m}");

        // Q = alpha I against F = I (gamma = 0): metric = alpha^2 - alpha,
        // independent of u.
        let eye = SpectralFisher::new(4, &Spectrum::Explicit(vec![1.0; 4]), 0.0, 0).unwrap();
        let alpha = 3.0;
        let qa = QDiagonal::scaled_identity(4, alpha).unwrap();
        let op = StepFvp::Exact {
            fisher: &eye,
            mask: None,
        };
        let us4: Vec<DVector<f64>> = (0..8).map(|_| normal_vector(4, &mut rng)).collect();
        let m = convergence_metric(&qa, &op, &us4).unwrap();
        assert!((m - (alpha * alpha - alpha)).abs() < 1e-10);
    }

    #[test]
    fn metric_positive_for_doubled_inverse() {
        let f = fig_fisher(6);
        let q = QFull::from_dense_spd(&(f.dense_inverse() * 2.0)).unwrap();
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let mut rng = seeded_rng(5, 0);
        for _ in 0..5 {
            let u = vec![normal_vector(6, &mut rng)];
            let m = convergence_metric(&q, &op, &u).unwrap();
            // (4 - 2) u'Finv u / |u|^2 > 0 for every u.
            assert!(m > 0.0, "metric {m} not positive");
        }
    }

    #[test]
    fn gradient_zero_at_solution() {
        let f = fig_fisher(6);
        let q = QFull::from_dense_spd(&f.dense_inverse()).unwrap();
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let mut rng = seeded_rng(6, 0);
        let u = normal_vector(6, &mut rng);
        for mode in [PreconditionerMode::Identity, PreconditionerMode::CurrentQ] {
            let g = aux_gradient(&q, &op, &u, mode).unwrap();
            assert!(
                g.amax() < 1e-9,
                "gradient at stationarity ({mode:?}) has max {}",
                g.amax()
            );
        }
    }

    #[test]
    fn identity_gradient_matches_loss_finite_differences() {
        let f = fig_fisher(5);
        let mut q = QFull::scaled_identity(5, 2.0).unwrap();
        let mut rng = seeded_rng(7, 0);
        let mut p = q.flat_params();
        for x in p.iter_mut() {
            *x += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        q.set_flat_params(&p).unwrap();
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let u = normal_vector(5, &mut rng);
        let g = aux_gradient(&q, &op, &u, PreconditionerMode::Identity).unwrap();

        let base = q.flat_params();
        let h = 1e-5;
        let mut fd = DVector::zeros(base.len());
        for k in 0..base.len() {
            let mut pp = base.clone();
            pp[k] += h;
            q.set_flat_params(&pp).unwrap();
            let hi = aux_loss_sample(&q, &op, &u).unwrap();
            pp[k] = base[k] - h;
            q.set_flat_params(&pp).unwrap();
            let lo = aux_loss_sample(&q, &op, &u).unwrap();
            fd[k] = (hi - lo) / (2.0 * h);
        }
        let rel = (&g - &fd).norm() / fd.norm();
        assert!(rel < 1e-6, "gradient vs finite differences rel err {rel}");
    }

    #[test]
    fn preconditioner_costs_exactly_one_extra_qv_per_sample() {
        let f = fig_fisher(6);
        let mut q = QFull::scaled_identity(6, 2.0).unwrap();
        let counting = CountingQ::new(&mut q);
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let mut rng = seeded_rng(8, 0);
        let u = normal_vector(6, &mut rng);

        counting.reset();
        aux_gradient(&counting, &op, &u, PreconditionerMode::Identity).unwrap();
        let identity_calls = counting.qv_calls();

        counting.reset();
        aux_gradient(&counting, &op, &u, PreconditionerMode::CurrentQ).unwrap();
        let precond_calls = counting.qv_calls();

        assert_eq!(precond_calls, identity_calls + 1);
    }

    #[test]
    fn loss_uses_two_qv_products() {
        let f = fig_fisher(6);
        let mut q = QFull::scaled_identity(6, 2.0).unwrap();
        let counting = CountingQ::new(&mut q);
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let mut rng = seeded_rng(9, 0);
        let u = normal_vector(6, &mut rng);
        counting.reset();
        aux_loss_sample(&counting, &op, &u).unwrap();
        assert_eq!(counting.qv_calls(), 2);
    }

    #[test]
    fn minimize_aux_zero_budget_is_identity() {
        let f = fig_fisher(6);
        let mut q = QFull::scaled_identity(6, 5.0).unwrap();
        let before = q.flat_params();
        let mut source = FvpSource::exact(&f);
        let trace = minimize_aux(&mut q, &mut source, &AuxConfig::new(0.01), 0, 3).unwrap();
        assert!(trace.rows.is_empty());
        assert_eq!(q.flat_params(), before);
    }

    #[test]
    fn minimize_aux_reduces_metric_on_easy_problem() {
        let f = SpectralFisher::new(8, &Spectrum::ExpDecay(5.0), 0.1, 3).unwrap();
        let mut q = QFull::scaled_identity(8, 10.0).unwrap();
        let mut source = FvpSource::exact(&f);
        let mut cfg = AuxConfig::new(0.05);
        cfg.samples_per_step = 4;
        let trace = minimize_aux(&mut q, &mut source, &cfg, 800, 5).unwrap();
        let first = trace.rows.first().unwrap().metric;
        let last = trace.rows.last().unwrap().metric;
        assert!(
            last.abs() < 0.05 * first.abs(),
            "metric did not shrink: {first} -> {last}"
        );
    }

    #[test]
    fn sgd_metric_decreases_monotonically_after_burn_in() {
        // Large-alpha start on the ill-conditioned power spectrum: the
        // held-out metric decreases monotonically once past early noise.
        let f = fig_fisher(30);
        let mut q = QFull::scaled_identity(30, 1000.0).unwrap();
        let mut source = FvpSource::exact(&f);
        let mut cfg = AuxConfig::new(4e-4);
        cfg.rule = StepRule::Sgd;
        cfg.samples_per_step = 8;
        cfg.metric_every = 100;
        let trace = minimize_aux(&mut q, &mut source, &cfg, 2000, 11).unwrap();
        let metrics: Vec<f64> = trace.rows.iter().map(|r| r.metric).collect();
        let burn = metrics.len() / 5;
        for w in metrics[burn..].windows(2) {
            assert!(
                w[1] <= w[0] * 1.02 + 1e-9,
                "metric rose after burn-in: {:?}",
                &metrics
            );
        }
        assert!(metrics.last().unwrap() < &metrics[burn]);
    }

    #[test]
    fn tiny_eta_step_matches_first_order_loss_prediction() {
        let f = fig_fisher(6);
        let mut q = QFull::scaled_identity(6, 2.0).unwrap();
        let mut rng = seeded_rng(10, 0);
        let u = normal_vector(6, &mut rng);
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        // Fixed probe so the loss is deterministic.
        let mut cfg = AuxConfig::new(1e-6);
        cfg.u_dist = UDistribution::FixedSet(vec![u.clone()]);
        cfg.rule = StepRule::Sgd;
        let before = aux_loss_sample(&q, &op, &u).unwrap();
        let g = aux_gradient(&q, &op, &u, PreconditionerMode::Identity).unwrap();
        let mut opt = AuxOptimizer::new(cfg, &q, 1).unwrap();
        let mut source = FvpSource::exact(&f);
        opt.step(&mut q, &mut source).unwrap();
        let after = aux_loss_sample(&q, &op, &u).unwrap();
        let predicted = -1e-6 * g.norm_squared();
        let actual = after - before;
        assert!(
            (actual - predicted).abs() < 0.2 * predicted.abs(),
            "first-order prediction {predicted} vs actual {actual}"
        );
    }

    #[test]
    fn divergence_guard_trips_on_huge_step_size() {
        let f = fig_fisher(10);
        let mut q = QFull::scaled_identity(10, 1000.0).unwrap();
        let mut source = FvpSource::exact(&f);
        let mut cfg = AuxConfig::new(1e6);
        cfg.rule = StepRule::Sgd;
        cfg.metric_every = 5;
        let err = minimize_aux(&mut q, &mut source, &cfg, 200, 0);
        assert!(matches!(err, Err(CoreError::Diverged { .. })), "{err:?}");
    }

    #[test]
    fn stochastic_gradient_is_unbiased_in_the_fvp() {
        // Mean of minibatch gradients at a fixed probe matches the exact
        // gradient within 5 standard errors, componentwise.
        let cov = SpectralFisher::new(8, &Spectrum::ExpDecay(4.0), 0.05, 3).unwrap();
        let task = LinearTask::new(cov, 0.1, 16, 5).unwrap();
        let mut q = QFull::scaled_identity(8, 3.0).unwrap();
        let mut rng = seeded_rng(11, 0);
        let mut p = q.flat_params();
        for x in p.iter_mut() {
            *x += 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        q.set_flat_params(&p).unwrap();
        let u = normal_vector(8, &mut rng);

        let exact_op = StepFvp::Exact {
            fisher: task.fisher(),
            mask: None,
        };
        for mode in [PreconditionerMode::Identity, PreconditionerMode::CurrentQ] {
            let exact_grad = aux_gradient(&q, &exact_op, &u, mode).unwrap();
            let trials = 4000;
            let dim = exact_grad.len();
            let mut mean = DVector::zeros(dim);
            let mut m2 = DVector::zeros(dim);
            for t in 0..trials {
                let batch = task.sample_gradient_batch(t as u64);
                let g = aux_gradient(&q, &StepFvp::Batch(batch), &u, mode).unwrap();
                let delta = &g - &mean;
                mean += &delta / (t + 1) as f64;
                let delta2 = &g - &mean;
                m2 += delta.component_mul(&delta2);
            }
            for k in 0..dim {
                let se = (m2[k] / (trials as f64 - 1.0) / trials as f64).sqrt();
                let dev = (mean[k] - exact_grad[k]).abs();
                assert!(
                    dev <= 5.0 * se + 1e-12,
                    "{mode:?} component {k}: |bias| {dev} > 5 se {se}"
                );
            }
        }
    }

    #[test]
    fn qfull_stays_symmetric_pd_along_optimization() {
        let f = fig_fisher(10);
        let mut q = QFull::scaled_identity(10, 100.0).unwrap();
        let mut source = FvpSource::exact(&f);
        let cfg = AuxConfig::new(0.01);
        let mut opt = AuxOptimizer::new(cfg, &q, 2).unwrap();
        for _ in 0..50 {
            opt.step(&mut q, &mut source).unwrap();
            let d = q.dense();
            assert!(max_abs(&(&d - &d.transpose())) < 1e-12);
            assert!(d.clone().cholesky().is_some(), "Q left the SPD cone");
        }
    }

    #[test]
    fn eigen_decoupling_off_diagonals_stay_small() {
        // Diagonal F with the isotropic expectation of the gradient (taken
        // exactly as the mean over the standard basis): off-diagonal entries
        // of dense(Q) stay below 1e-3 of the largest diagonal entry along the
        // whole descent, i.e. the decoupling survives the softplus-Cholesky
        // parameterization.
        let n = 10;
        let f = SpectralFisher::from_parts(
            DMatrix::identity(n, n),
            DVector::from_fn(n, |i, _| 1.0 / ((i + 1) as f64 * (i + 1) as f64)),
            1e-2,
        )
        .unwrap();
        let mut q = QFull::scaled_identity(n, 100.0).unwrap();
        let op = StepFvp::Exact {
            fisher: &f,
            mask: None,
        };
        let basis: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                e
            })
            .collect();
        let eta = 2e-3;
        let mut moved = false;
        for _ in 0..400 {
            let mut grad = DVector::zeros(q.param_count());
            for e in &basis {
                grad += aux_gradient(&q, &op, e, PreconditionerMode::Identity).unwrap();
            }
            grad /= n as f64;
            let p = q.flat_params() - grad * eta;
            q.set_flat_params(&p).unwrap();

            let d = q.dense();
            let mut max_diag = 0.0f64;
            let mut max_off = 0.0f64;
            for i in 0..n {
                max_diag = max_diag.max(d[(i, i)].abs());
                for j in 0..n {
                    if i != j {
                        max_off = max_off.max(d[(i, j)].abs());
                    }
                }
            }
            assert!(
                max_off < 1e-3 * max_diag,
                "off-diagonal leak: {max_off} vs diag {max_diag}"
            );
            if (d[(0, 0)] - 100.0).abs() > 10.0 {
                moved = true;
            }
        }
        assert!(moved, "descent made no progress on the fast mode");
    }

    #[test]
    fn masked_exact_fvp_zeroes_dead_rows_and_keeps_damping() {
        let f = fig_fisher(6);
        let mask = vec![true, false, true, true, false, true];
        let op = StepFvp::Exact {
            fisher: &f,
            mask: Some(mask.clone()),
        };
        let mut rng = seeded_rng(12, 0);
        let v = normal_vector(6, &mut rng);
        let out = op.apply(&v).unwrap();
        // Dense oracle: (M F M + gamma I) v.
        let mut m = DMatrix::identity(6, 6);
        for (i, alive) in mask.iter().enumerate() {
            if !alive {
                m[(i, i)] = 0.0;
            }
        }
        let dense = &m * f.dense_undamped() * &m + DMatrix::identity(6, 6) * f.damping();
        assert!((out - dense * &v).norm() < 1e-12);
    }
}
