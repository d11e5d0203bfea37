//! Lower-triangular Cholesky factor with a softplus-mapped diagonal.
//!
//! One `CholFactor` represents an SPD block `C C'`, where `C` is lower
//! triangular with strictly positive diagonal. The raw (flat) parameters are
//! the strictly-lower entries plus the unconstrained preimages of the
//! diagonal, in row-major lower-triangle order. Both `QFull` and the blocks
//! of `QBlockDiagonal` are built from this type.

use nalgebra::{DMatrix, DVector};

use super::map::{softplus, softplus_grad, softplus_inv};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub(crate) struct CholFactor {
    n: usize,
    /// Row-major lower triangle; diagonal entries are softplus preimages.
    raw: Vec<f64>,
    /// Materialized factor `C` (diagonal already mapped to positive).
    factor: DMatrix<f64>,
}

impl CholFactor {
    pub fn param_count_for(n: usize) -> usize {
        n * (n + 1) / 2
    }

    /// Factor `sqrt(alpha) * I`, so the represented block is `alpha * I`.
    pub fn scaled_identity(n: usize, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(CoreError::invalid("alpha must be positive"));
        }
        let mut raw = vec![0.0; Self::param_count_for(n)];
        let d = softplus_inv(alpha.sqrt());
        for i in 0..n {
            raw[i * (i + 1) / 2 + i] = d;
        }
        let mut me = Self {
            n,
            raw,
            factor: DMatrix::zeros(n, n),
        };
        me.rebuild();
        Ok(me)
    }

    /// Factor of a dense SPD matrix, via its Cholesky decomposition.
    pub fn from_dense_spd(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(CoreError::invalid("matrix must be square"));
        }
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| CoreError::NotPositiveDefinite("Cholesky factorization failed".into()))?;
        let l = chol.l();
        let mut raw = vec![0.0; Self::param_count_for(n)];
        for i in 0..n {
            for j in 0..=i {
                let k = i * (i + 1) / 2 + j;
                raw[k] = if i == j { softplus_inv(l[(i, i)]) } else { l[(i, j)] };
            }
        }
        let mut me = Self {
            n,
            raw,
            factor: DMatrix::zeros(n, n),
        };
        me.rebuild();
        Ok(me)
    }

    fn rebuild(&mut self) {
        let n = self.n;
        let mut f = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k = i * (i + 1) / 2 + j;
                f[(i, j)] = if i == j { softplus(self.raw[k]) } else { self.raw[k] };
            }
        }
        self.factor = f;
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn param_count(&self) -> usize {
        self.raw.len()
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn set_raw(&mut self, raw: &[f64]) {
        debug_assert_eq!(raw.len(), self.raw.len());
        self.raw.copy_from_slice(raw);
        self.rebuild();
    }

    /// `C C' v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = self.factor.tr_mul(v);
        &self.factor * w
    }

    /// Diagonal of `C C'` as row sums of `C .* C`.
    pub fn diag(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| {
            let mut s = 0.0;
            for j in 0..=i {
                let c = self.factor[(i, j)];
                s += c * c;
            }
            s
        })
    }

    /// Gradient of `r' (C C') u` with respect to the raw parameters:
    /// `dC = r (C'u)' + u (C'r)'`, projected onto the lower triangle with the
    /// diagonal chained through the softplus derivative.
    pub fn vjp(&self, u: &DVector<f64>, r: &DVector<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.raw.len());
        let ctu = self.factor.tr_mul(u);
        let ctr = self.factor.tr_mul(r);
        for i in 0..self.n {
            for j in 0..=i {
                let k = i * (i + 1) / 2 + j;
                let g = r[i] * ctu[j] + u[i] * ctr[j];
                out[k] = if i == j { g * softplus_grad(self.raw[k]) } else { g };
            }
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, random_spd, seeded_rng};

    #[test]
    fn scaled_identity_represents_alpha_i() {
        let c = CholFactor::scaled_identity(4, 1000.0).unwrap();
        let err = max_abs(&(c.dense() - DMatrix::identity(4, 4) * 1000.0));
        assert!(err < 1e-9, "alpha I defect {err}");
    }

    #[test]
    fn from_dense_round_trips() {
        let mut rng = seeded_rng(5, 0);
        let m = random_spd(6, 0.01, 900.0, &mut rng);
        let c = CholFactor::from_dense_spd(&m).unwrap();
        let err = max_abs(&(c.dense() - &m));
        assert!(err < 1e-9 * 900.0, "round trip defect {err}");
    }
}
