//! Full parameterization `Q = L L'` over the whole parameter space.

use nalgebra::{DMatrix, DVector};

use super::chol::CholFactor;
use super::{QKind, QParameterization};
use crate::error::{CoreError, Result};

/// `Q = L L'` with a lower-triangular `L`; the most expressive family, able
/// to represent any SPD matrix.
#[derive(Debug, Clone)]
pub struct QFull {
    chol: CholFactor,
}

impl QFull {
    /// `Q = alpha * I`.
    pub fn scaled_identity(n: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            chol: CholFactor::scaled_identity(n, alpha)?,
        })
    }

    /// Exact representation of a dense SPD matrix.
    pub fn from_dense_spd(m: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            chol: CholFactor::from_dense_spd(m)?,
        })
    }
}

impl QParameterization for QFull {
    fn dim(&self) -> usize {
        self.chol.dim()
    }

    fn kind(&self) -> QKind {
        QKind::Full { n: self.chol.dim() }
    }

    fn qv(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "qv",
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(self.chol.apply(v))
    }

    fn diag(&self) -> DVector<f64> {
        self.chol.diag()
    }

    fn param_count(&self) -> usize {
        self.chol.param_count()
    }

    fn flat_params(&self) -> DVector<f64> {
        DVector::from_column_slice(self.chol.raw())
    }

    fn set_flat_params(&mut self, params: &DVector<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(CoreError::DimensionMismatch {
                context: "set_flat_params",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        self.chol.set_raw(params.as_slice());
        Ok(())
    }

    fn qv_vjp(&self, u: &DVector<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.dim() || r.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "qv_vjp",
                expected: self.dim(),
                got: u.len().max(r.len()),
            });
        }
        let mut out = DVector::zeros(self.param_count());
        self.chol.vjp(u, r, out.as_mut_slice());
        Ok(out)
    }

    fn dense(&self) -> DMatrix<f64> {
        assert!(self.dim() <= super::DENSE_DIM_LIMIT, "dense(Q) is guarded to n <= 2048");
        self.chol.dense()
    }
}
