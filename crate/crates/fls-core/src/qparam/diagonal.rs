//! Positive diagonal parameterization.

use nalgebra::{DMatrix, DVector};

use super::map::{softplus, softplus_grad, softplus_inv};
use super::{QKind, QParameterization};
use crate::error::{CoreError, Result};

/// `Q = diag(c^2)` with `c = softplus(raw)`, so every diagonal entry is
/// strictly positive and the flat parameters are unconstrained.
#[derive(Debug, Clone)]
pub struct QDiagonal {
    raw: DVector<f64>,
    // Cached positive square roots c.
    chol_diag: DVector<f64>,
}

impl QDiagonal {
    pub fn scaled_identity(n: usize, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(CoreError::invalid("alpha must be positive"));
        }
        let raw = DVector::from_element(n, softplus_inv(alpha.sqrt()));
        Ok(Self::from_raw(raw))
    }

    /// Exact representation of a positive diagonal.
    pub fn from_diagonal(diag: &DVector<f64>) -> Result<Self> {
        if diag.iter().any(|d| *d <= 0.0) {
            return Err(CoreError::NotPositiveDefinite(
                "diagonal entries must be positive".into(),
            ));
        }
        let raw = diag.map(|d| softplus_inv(d.sqrt()));
        Ok(Self::from_raw(raw))
    }

    fn from_raw(raw: DVector<f64>) -> Self {
        let chol_diag = raw.map(softplus);
        Self { raw, chol_diag }
    }
}

impl QParameterization for QDiagonal {
    fn dim(&self) -> usize {
        self.raw.len()
    }

    fn kind(&self) -> QKind {
        QKind::Diagonal { n: self.dim() }
    }

    fn qv(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "qv",
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(self.diag().component_mul(v))
    }

    fn diag(&self) -> DVector<f64> {
        self.chol_diag.component_mul(&self.chol_diag)
    }

    fn param_count(&self) -> usize {
        self.dim()
    }

    fn flat_params(&self) -> DVector<f64> {
        self.raw.clone()
    }

    fn set_flat_params(&mut self, params: &DVector<f64>) -> Result<()> {
        if params.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "set_flat_params",
                expected: self.dim(),
                got: params.len(),
            });
        }
        self.raw.copy_from(params);
        self.chol_diag = self.raw.map(softplus);
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
        // d(r' Q u)/d raw_i = u_i r_i * 2 c_i * sigmoid(raw_i)
        Ok(DVector::from_fn(self.dim(), |i, _| {
            u[i] * r[i] * 2.0 * self.chol_diag[i] * softplus_grad(self.raw[i])
        }))
    }

    fn dense(&self) -> DMatrix<f64> {
        assert!(self.dim() <= super::DENSE_DIM_LIMIT, "dense(Q) is guarded to n <= 2048");
        DMatrix::from_diagonal(&self.diag())
    }
}
