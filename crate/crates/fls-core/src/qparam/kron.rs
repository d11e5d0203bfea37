//! Kronecker-factored parameterization for dense and convolutional layers:
//! `Q = D (L L' \otimes R R') D`.
//!
//! `L` is `n_o x n_o` over layer outputs and `R` is `n_c x n_c` over the
//! folded input dimension (`n_i`, `n_i + 1` with a bias column, or
//! `n_i * K` for convolutions). `D` is a positive diagonal of size
//! `n_o * n_c` that makes the family strictly more expressive than a plain
//! Kronecker product. Vectors are reshaped row-wise, so `Qv` is evaluated as
//! `d .* vec(LL' (V .* Dbar) RR')` without ever materializing the Kronecker
//! product: cost `O(n_o^2 n_c + n_o n_c^2)`.

use nalgebra::{DMatrix, DVector};

use super::map::{softplus, softplus_grad, softplus_inv};
use super::{QKind, QParameterization};
use crate::error::{CoreError, Result};
use crate::linalg::{kron_vec, unvec_row_major, vec_row_major};

/// Which layer geometry the folded column dimension came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KronLayout {
    /// Dense layer: columns are `n_i` inputs, plus one if `bias`.
    Dense { inputs: usize, bias: bool },
    /// Convolution: columns fold `n_i` input channels with kernel size `k`.
    Conv { in_channels: usize, kernel: usize },
}

impl KronLayout {
    pub fn cols(&self) -> usize {
        match *self {
            KronLayout::Dense { inputs, bias } => inputs + usize::from(bias),
            KronLayout::Conv { in_channels, kernel } => in_channels * kernel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QKronecker {
    rows: usize,
    layout: KronLayout,
    /// Unconstrained factor matrices; `L L'` and `R R'` are PSD by form.
    l: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Softplus preimages of the diagonal scaling.
    d_raw: DVector<f64>,
    d: DVector<f64>,
}

impl QKronecker {
    /// Dense-layer block with `Q = alpha I` (factors identity, `D` carries
    /// the scale `sqrt(alpha)`).
    pub fn dense_layer(outputs: usize, inputs: usize, bias: bool, alpha: f64) -> Result<Self> {
        Self::with_layout(outputs, KronLayout::Dense { inputs, bias }, alpha)
    }

    /// Convolutional block: the input-channel and kernel dimensions are
    /// folded into a single `n_i * k` factor.
    pub fn conv_layer(outputs: usize, in_channels: usize, kernel: usize, alpha: f64) -> Result<Self> {
        Self::with_layout(outputs, KronLayout::Conv { in_channels, kernel }, alpha)
    }

    pub fn with_layout(rows: usize, layout: KronLayout, alpha: f64) -> Result<Self> {
        if rows == 0 || layout.cols() == 0 {
            return Err(CoreError::invalid("factor dimensions must be positive"));
        }
        if alpha <= 0.0 {
            return Err(CoreError::invalid("alpha must be positive"));
        }
        let cols = layout.cols();
        let d_raw = DVector::from_element(rows * cols, softplus_inv(alpha.sqrt()));
        let d = d_raw.map(softplus);
        Ok(Self {
            rows,
            layout,
            l: DMatrix::identity(rows, rows),
            r: DMatrix::identity(cols, cols),
            d_raw,
            d,
        })
    }

    /// Builds from explicit factors and a positive diagonal (tests, oracles).
    pub fn from_factors(
        layout_rows: usize,
        layout: KronLayout,
        l: DMatrix<f64>,
        r: DMatrix<f64>,
        d: DVector<f64>,
    ) -> Result<Self> {
        let cols = layout.cols();
        if l.nrows() != layout_rows || l.ncols() != layout_rows {
            return Err(CoreError::invalid("L must be n_o x n_o"));
        }
        if r.nrows() != cols || r.ncols() != cols {
            return Err(CoreError::invalid("R must match the folded column size"));
        }
        if d.len() != layout_rows * cols {
            return Err(CoreError::invalid("D must have n_o * n_c entries"));
        }
        if d.iter().any(|x| *x <= 0.0) {
            return Err(CoreError::NotPositiveDefinite("D entries must be positive".into()));
        }
        let d_raw = d.map(softplus_inv);
        let d = d_raw.map(softplus);
        Ok(Self {
            rows: layout_rows,
            layout,
            l,
            r,
            d_raw,
            d,
        })
    }

    pub fn factor_rows(&self) -> usize {
        self.rows
    }

    pub fn factor_cols(&self) -> usize {
        self.layout.cols()
    }

    pub fn layout(&self) -> KronLayout {
        self.layout
    }

    /// `vec(LL' unvec(x) RR')` under the row-major reshape.
    fn kron_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let xm = unvec_row_major(x, self.rows, self.factor_cols());
        let left = &self.l * (self.l.tr_mul(&xm));
        let out = (&left * &self.r) * self.r.transpose();
        vec_row_major(&out)
    }
}

impl QParameterization for QKronecker {
    fn dim(&self) -> usize {
        self.rows * self.factor_cols()
    }

    fn kind(&self) -> QKind {
        match self.layout {
            KronLayout::Dense { inputs, bias } => QKind::KroneckerDense {
                outputs: self.rows,
                inputs,
                bias,
            },
            KronLayout::Conv { in_channels, kernel } => QKind::KroneckerConv {
                outputs: self.rows,
                in_channels,
                kernel,
            },
        }
    }

    fn qv(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "qv",
                expected: self.dim(),
                got: v.len(),
            });
        }
        let scaled = self.d.component_mul(v);
        Ok(self.d.component_mul(&self.kron_apply(&scaled)))
    }

    fn diag(&self) -> DVector<f64> {
        // diag(D)^2 .* (diag(LL') kron diag(RR')), with diag(LL') as row
        // sums of L .* L.
        let dl = DVector::from_fn(self.rows, |i, _| self.l.row(i).iter().map(|x| x * x).sum());
        let dr = DVector::from_fn(self.factor_cols(), |i, _| {
            self.r.row(i).iter().map(|x| x * x).sum()
        });
        self.d.component_mul(&self.d).component_mul(&kron_vec(&dl, &dr))
    }

    fn param_count(&self) -> usize {
        self.rows * self.rows + self.factor_cols() * self.factor_cols() + self.dim()
    }

    fn flat_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(vec_row_major(&self.l).iter());
        out.extend(vec_row_major(&self.r).iter());
        out.extend(self.d_raw.iter());
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
        let no2 = self.rows * self.rows;
        let nc = self.factor_cols();
        let nc2 = nc * nc;
        let s = params.as_slice();
        self.l = unvec_row_major(&DVector::from_column_slice(&s[..no2]), self.rows, self.rows);
        self.r = unvec_row_major(&DVector::from_column_slice(&s[no2..no2 + nc2]), nc, nc);
        self.d_raw = DVector::from_column_slice(&s[no2 + nc2..]);
        self.d = self.d_raw.map(softplus);
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
        let nc = self.factor_cols();
        // r' Q u = a' (LL' kron RR') b with a = D r, b = D u.
        let a = self.d.component_mul(r);
        let b = self.d.component_mul(u);
        let am = unvec_row_major(&a, self.rows, nc);
        let bm = unvec_row_major(&b, self.rows, nc);
        let lg = &self.l * self.l.transpose();
        let rg = &self.r * self.r.transpose();

        // dL: A Rg B' L + B Rg A' L
        let arg = &am * &rg;
        let brg = &bm * &rg;
        let grad_l = (&arg * bm.transpose() + &brg * am.transpose()) * &self.l;
        // dR: B' Lg A R + A' Lg B R
        let lga = &lg * &am;
        let lgb = &lg * &bm;
        let grad_r = (bm.transpose() * &lga + am.transpose() * &lgb) * &self.r;
        // dD_k: r_k (K b)_k + (K a)_k u_k, chained through softplus.
        let ka = vec_row_major(&(&lga * &rg));
        let kb = vec_row_major(&(&lgb * &rg));
        let grad_d = DVector::from_fn(self.dim(), |k, _| {
            (r[k] * kb[k] + ka[k] * u[k]) * softplus_grad(self.d_raw[k])
        });

        let mut out = Vec::with_capacity(self.param_count());
        out.extend(vec_row_major(&grad_l).iter());
        out.extend(vec_row_major(&grad_r).iter());
        out.extend(grad_d.iter());
        Ok(DVector::from_vec(out))
    }

    fn dense(&self) -> DMatrix<f64> {
        assert!(self.dim() <= super::DENSE_DIM_LIMIT, "dense(Q) is guarded to n <= 2048");
        let lg = &self.l * self.l.transpose();
        let rg = &self.r * self.r.transpose();
        let kron = lg.kronecker(&rg);
        let dm = DMatrix::from_diagonal(&self.d);
        &dm * kron * &dm
    }
}
