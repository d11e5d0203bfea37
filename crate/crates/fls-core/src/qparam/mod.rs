//! Structured positive-definite parameterizations `Q(lambda)` of the inverse
//! damped Fisher.
//!
//! Every family exposes the same surface: `Qv` products, `diag(Q)`, a flat
//! unconstrained parameter vector, the vector-Jacobian product
//! `d(r' Q(lambda) u) / d lambda` used by auxiliary-loss gradients, and a
//! guarded dense materialization for oracles and small-scale metrics.

mod block;
mod chol;
mod diagonal;
mod full;
mod kron;
pub mod map;

pub use block::QBlockDiagonal;
pub use diagonal::QDiagonal;
pub use full::QFull;
pub use kron::{KronLayout, QKronecker};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// `dense(Q)` exists for oracles and tests, not the hot path.
pub(crate) const DENSE_DIM_LIMIT: usize = 2048;

/// Shape descriptor for constructing a parameterization from configuration,
/// and for serializing snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QKind {
    Full { n: usize },
    Diagonal { n: usize },
    BlockDiagonal { n: usize, block_size: usize },
    KroneckerDense { outputs: usize, inputs: usize, bias: bool },
    KroneckerConv { outputs: usize, in_channels: usize, kernel: usize },
}

impl QKind {
    pub fn dim(&self) -> usize {
        match *self {
            QKind::Full { n } | QKind::Diagonal { n } => n,
            QKind::BlockDiagonal { n, .. } => n,
            QKind::KroneckerDense { outputs, inputs, bias } => outputs * (inputs + usize::from(bias)),
            QKind::KroneckerConv { outputs, in_channels, kernel } => outputs * in_channels * kernel,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            QKind::Full { .. } => "full".into(),
            QKind::Diagonal { .. } => "diagonal".into(),
            QKind::BlockDiagonal { block_size, .. } => format!("block{block_size}"),
            QKind::KroneckerDense { .. } => "kron".into(),
            QKind::KroneckerConv { .. } => "kron_conv".into(),
        }
    }
}

/// A trainable SPD approximation of the inverse damped Fisher.
///
/// Instances are mutated only through
/// [`set_flat_params`](QParameterization::set_flat_params); all reads are
/// const, so one instance may serve concurrent readers between updates.
pub trait QParameterization: Send {
    fn dim(&self) -> usize;

    fn kind(&self) -> QKind;

    /// `Q(lambda) v`.
    fn qv(&self, v: &DVector<f64>) -> Result<DVector<f64>>;

    /// `diag(Q)`, evaluated without materializing `Q`.
    fn diag(&self) -> DVector<f64>;

    fn param_count(&self) -> usize;

    /// Flat unconstrained parameter vector `lambda`; round-trips bit-exactly
    /// through [`set_flat_params`](QParameterization::set_flat_params).
    fn flat_params(&self) -> DVector<f64>;

    fn set_flat_params(&mut self, params: &DVector<f64>) -> Result<()>;

    /// `d(r' Q(lambda) u) / d lambda`, analytic per family.
    fn qv_vjp(&self, u: &DVector<f64>, r: &DVector<f64>) -> Result<DVector<f64>>;

    /// Dense `Q` (guarded to `n <= 2048`).
    fn dense(&self) -> DMatrix<f64>;
}

/// Builds `Q` with `dense(Q) = alpha I` exactly. For Kronecker families the
/// factors are identity and `D = sqrt(alpha) I` carries the scale.
pub fn init_scaled_identity(kind: &QKind, alpha: f64) -> Result<Box<dyn QParameterization>> {
    if alpha <= 0.0 {
        return Err(CoreError::invalid("alpha must be positive"));
    }
    Ok(match *kind {
        QKind::Full { n } => Box::new(QFull::scaled_identity(n, alpha)?),
        QKind::Diagonal { n } => Box::new(QDiagonal::scaled_identity(n, alpha)?),
        QKind::BlockDiagonal { n, block_size } => {
            Box::new(QBlockDiagonal::scaled_identity(n, block_size, alpha)?)
        }
        QKind::KroneckerDense { outputs, inputs, bias } => {
            Box::new(QKronecker::dense_layer(outputs, inputs, bias, alpha)?)
        }
        QKind::KroneckerConv { outputs, in_channels, kernel } => {
            Box::new(QKronecker::conv_layer(outputs, in_channels, kernel, alpha)?)
        }
    })
}

/// Serializable snapshot of a parameterization (kind + flat parameters), for
/// run resumption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QSnapshot {
    pub kind: QKind,
    pub params: Vec<f64>,
}

impl QSnapshot {
    pub fn capture(q: &dyn QParameterization) -> Self {
        Self {
            kind: q.kind(),
            params: q.flat_params().as_slice().to_vec(),
        }
    }

    pub fn restore(&self) -> Result<Box<dyn QParameterization>> {
        let mut q = init_scaled_identity(&self.kind, 1.0)?;
        q.set_flat_params(&DVector::from_column_slice(&self.params))?;
        Ok(q)
    }
}
