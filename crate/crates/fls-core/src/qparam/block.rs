//! Positive-definite block-diagonal parameterization.

use nalgebra::{DMatrix, DVector};

use super::chol::CholFactor;
use super::{QKind, QParameterization};
use crate::error::{CoreError, Result};

/// Block-diagonal `Q` with consecutive blocks of equal size, each an
/// independent `L L'` Cholesky block. Off-block entries are structurally zero.
#[derive(Debug, Clone)]
pub struct QBlockDiagonal {
    n: usize,
    block_size: usize,
    blocks: Vec<CholFactor>,
}

impl QBlockDiagonal {
    pub fn scaled_identity(n: usize, block_size: usize, alpha: f64) -> Result<Self> {
        Self::validate_shape(n, block_size)?;
        let blocks = (0..n / block_size)
            .map(|_| CholFactor::scaled_identity(block_size, alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            block_size,
            blocks,
        })
    }

    /// Exact representation of a list of dense SPD blocks.
    pub fn from_dense_blocks(blocks: &[DMatrix<f64>]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(CoreError::invalid("at least one block required"));
        }
        let b = blocks[0].nrows();
        if blocks.iter().any(|m| m.nrows() != b || m.ncols() != b) {
            return Err(CoreError::invalid("all blocks must be square of equal size"));
        }
        let factors = blocks
            .iter()
            .map(CholFactor::from_dense_spd)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n: b * blocks.len(),
            block_size: b,
            blocks: factors,
        })
    }

    fn validate_shape(n: usize, block_size: usize) -> Result<()> {
        if block_size == 0 || n == 0 || n % block_size != 0 {
            return Err(CoreError::invalid(format!(
                "dimension {n} is not divisible by block size {block_size}"
            )));
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    fn block_slice<'a>(&self, v: &'a DVector<f64>, k: usize) -> DVector<f64> {
        DVector::from_fn(self.block_size, |i, _| v[k * self.block_size + i])
    }
}

impl QParameterization for QBlockDiagonal {
    fn dim(&self) -> usize {
        self.n
    }

    fn kind(&self) -> QKind {
        QKind::BlockDiagonal {
            n: self.n,
            block_size: self.block_size,
        }
    }

    fn qv(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.n {
            return Err(CoreError::DimensionMismatch {
                context: "qv",
                expected: self.n,
                got: v.len(),
            });
        }
        let mut out = DVector::zeros(self.n);
        for (k, blk) in self.blocks.iter().enumerate() {
            let res = blk.apply(&self.block_slice(v, k));
            for i in 0..self.block_size {
                out[k * self.block_size + i] = res[i];
            }
        }
        Ok(out)
    }

    fn diag(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (k, blk) in self.blocks.iter().enumerate() {
            let d = blk.diag();
            for i in 0..self.block_size {
                out[k * self.block_size + i] = d[i];
            }
        }
        out
    }

    fn param_count(&self) -> usize {
        self.blocks.len() * CholFactor::param_count_for(self.block_size)
    }

    fn flat_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for blk in &self.blocks {
            out.extend_from_slice(blk.raw());
        }
        DVector::from_vec(out)
    }

    fn set_flat_params(&mut self, params: &DVector<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(CoreError::DimensionMismatch {
                context: "set_flat_params",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let per = CholFactor::param_count_for(self.block_size);
        for (k, blk) in self.blocks.iter_mut().enumerate() {
            blk.set_raw(&params.as_slice()[k * per..(k + 1) * per]);
        }
        Ok(())
    }

    fn qv_vjp(&self, u: &DVector<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.n || r.len() != self.n {
            return Err(CoreError::DimensionMismatch {
                context: "qv_vjp",
                expected: self.n,
                got: u.len().max(r.len()),
            });
        }
        let per = CholFactor::param_count_for(self.block_size);
        let mut out = DVector::zeros(self.param_count());
        for (k, blk) in self.blocks.iter().enumerate() {
            let ub = self.block_slice(u, k);
            let rb = self.block_slice(r, k);
            blk.vjp(&ub, &rb, &mut out.as_mut_slice()[k * per..(k + 1) * per]);
        }
        Ok(out)
    }

    fn dense(&self) -> DMatrix<f64> {
        assert!(self.n <= super::DENSE_DIM_LIMIT, "dense(Q) is guarded to n <= 2048");
        let mut out = DMatrix::zeros(self.n, self.n);
        for (k, blk) in self.blocks.iter().enumerate() {
            let d = blk.dense();
            let off = k * self.block_size;
            for i in 0..self.block_size {
                for j in 0..self.block_size {
                    out[(off + i, off + j)] = d[(i, j)];
                }
            }
        }
        out
    }
}
