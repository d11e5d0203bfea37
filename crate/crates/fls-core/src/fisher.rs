//! Ground-truth Fisher matrices with controlled spectra, and linear-Gaussian
//! tasks whose Fisher equals the input covariance.
//!
//! A [`SpectralFisher`] holds an eigendecomposition `F = U diag(xi) U'` plus a
//! damping `gamma`, so the damped matrix `F_gamma = F + gamma I` and its
//! inverse are available exactly. Stochastic estimates of `F` come from
//! [`GradientBatch`]es of per-example score gradients whose second moment is
//! `F` by construction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{CoreError, Result};
use crate::linalg;

/// Eigenvalue rule for constructing a ground-truth Fisher.
///
/// Rules are normalized so the largest eigenvalue is 1:
/// `Power(p)` gives `xi_i = 1 / i^p` for `i = 1..n`, and `ExpDecay(c)` gives
/// `xi_i = exp(-(i - 1) / c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Spectrum {
    Power(f64),
    ExpDecay(f64),
    Explicit(Vec<f64>),
}

impl Spectrum {
    /// Eigenvalues for dimension `n`, sorted non-increasing.
    pub fn eigenvalues(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(CoreError::invalid("dimension must be at least 1"));
        }
        match self {
            Spectrum::Power(p) => {
                if *p <= 0.0 {
                    return Err(CoreError::invalid("power exponent must be positive"));
                }
                Ok((1..=n).map(|i| (i as f64).powf(-p)).collect())
            }
            Spectrum::ExpDecay(c) => {
                if *c <= 0.0 {
                    return Err(CoreError::invalid("exp-decay constant must be positive"));
                }
                Ok((0..n).map(|i| (-(i as f64) / c).exp()).collect())
            }
            Spectrum::Explicit(vals) => {
                if vals.len() != n {
                    return Err(CoreError::DimensionMismatch {
                        context: "explicit spectrum",
                        expected: n,
                        got: vals.len(),
                    });
                }
                if vals.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(CoreError::NotPositiveDefinite(
                        "explicit spectrum contains a negative or non-finite eigenvalue".into(),
                    ));
                }
                let mut sorted = vals.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                Ok(sorted)
            }
        }
    }
}

impl FromStr for Spectrum {
    type Err = CoreError;

    /// Parses the config syntax `power:2`, `exp:30` or `list:[1,0.5,0.25]`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(p) = s.strip_prefix("power:") {
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| CoreError::invalid(format!("bad power spectrum '{s}'")))?;
            return Ok(Spectrum::Power(p));
        }
        if let Some(c) = s.strip_prefix("exp:") {
            let c: f64 = c
                .trim()
                .parse()
                .map_err(|_| CoreError::invalid(format!("bad exp spectrum '{s}'")))?;
            return Ok(Spectrum::ExpDecay(c));
        }
        if let Some(rest) = s.strip_prefix("list:") {
            let rest = rest.trim();
            let inner = rest
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(|| CoreError::invalid(format!("bad list spectrum '{s}'")))?;
            let vals = inner
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| CoreError::invalid(format!("bad list entry '{t}'")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if vals.is_empty() {
                return Err(CoreError::invalid("empty list spectrum"));
            }
            return Ok(Spectrum::Explicit(vals));
        }
        Err(CoreError::invalid(format!(
            "unknown spectrum '{s}' (expected power:<p>, exp:<c> or list:[..])"
        )))
    }
}

/// Ground-truth Fisher `F = U diag(xi) U'` with damping `gamma`.
///
/// Immutable after construction; sampling takes explicit seeds so the type is
/// safe to share across parallel runs.
#[derive(Debug, Clone)]
pub struct SpectralFisher {
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    damping: f64,
}

impl SpectralFisher {
    /// Builds an `n x n` Fisher with a random orthonormal eigenbasis
    /// (orthogonalized seeded Gaussian matrix) and the given spectrum.
    pub fn new(n: usize, spectrum: &Spectrum, damping: f64, seed: u64) -> Result<Self> {
        let eigs = spectrum.eigenvalues(n)?;
        let mut rng = linalg::seeded_rng(seed, 0);
        let basis = linalg::random_orthonormal(n, &mut rng);
        Self::from_parts(basis, DVector::from_vec(eigs), damping)
    }

    /// Builds from an explicit basis and eigenvalues, validating invariants:
    /// orthonormal basis (max defect 1e-10), non-negative sorted eigenvalues,
    /// and `F + gamma I` positive definite.
    pub fn from_parts(basis: DMatrix<f64>, eigenvalues: DVector<f64>, damping: f64) -> Result<Self> {
        let n = eigenvalues.len();
        if basis.nrows() != n || basis.ncols() != n {
            return Err(CoreError::DimensionMismatch {
                context: "eigenbasis",
                expected: n,
                got: basis.nrows(),
            });
        }
        let gram_defect = linalg::max_abs(&(basis.transpose() * &basis - DMatrix::identity(n, n)));
        if gram_defect > 1e-10 {
            return Err(CoreError::invalid(format!(
                "eigenbasis is not orthonormal (defect {gram_defect:.3e})"
            )));
        }
        if damping < 0.0 {
            return Err(CoreError::invalid("damping must be non-negative"));
        }
        let mut sorted = eigenvalues.as_slice().to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted
            .iter()
            .zip(eigenvalues.iter())
            .any(|(a, b)| (a - b).abs() > 0.0)
        {
            return Err(CoreError::invalid("eigenvalues must be sorted non-increasing"));
        }
        if eigenvalues.iter().any(|v| *v < 0.0) {
            return Err(CoreError::NotPositiveDefinite("negative eigenvalue".into()));
        }
        let min = eigenvalues[n - 1] + damping;
        if min <= 0.0 {
            return Err(CoreError::NotPositiveDefinite(format!(
                "smallest damped eigenvalue {min:.3e} is not positive"
            )));
        }
        Ok(Self {
            basis,
            eigenvalues,
            damping,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Eigenvalues of the damped inverse, `1 / (xi_i + gamma)`.
    pub fn inverse_eigenvalues(&self) -> DVector<f64> {
        self.eigenvalues.map(|x| 1.0 / (x + self.damping))
    }

    /// `(F + gamma I) v`, exact.
    pub fn fvp(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "fisher_vector_product",
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(self.fvp_undamped(v) + v * self.damping)
    }

    /// `F v` without damping.
    pub fn fvp_undamped(&self, v: &DVector<f64>) -> DVector<f64> {
        let proj = self.basis.transpose() * v;
        &self.basis * proj.component_mul(&self.eigenvalues)
    }

    /// Dense `F + gamma I`.
    pub fn dense(&self) -> DMatrix<f64> {
        self.dense_undamped() + DMatrix::identity(self.dim(), self.dim()) * self.damping
    }

    /// Dense `F`.
    pub fn dense_undamped(&self) -> DMatrix<f64> {
        &self.basis * DMatrix::from_diagonal(&self.eigenvalues) * self.basis.transpose()
    }

    /// Dense `(F + gamma I)^{-1}` from the eigendecomposition.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        &self.basis * DMatrix::from_diagonal(&self.inverse_eigenvalues()) * self.basis.transpose()
    }

    /// Draws `m` score gradients `g_j = F^{1/2} z_j`, `z ~ N(0, I)`, so that
    /// `E[(1/m) G'G] = F`.
    pub fn sample_gradient_batch(&self, m: usize, seed: u64) -> Result<GradientBatch> {
        if m == 0 {
            return Err(CoreError::invalid("batch size must be at least 1"));
        }
        let n = self.dim();
        let mut rng = linalg::seeded_rng(seed, 1);
        let sqrt = self.eigenvalues.map(f64::sqrt);
        let mut grads = DMatrix::zeros(m, n);
        for j in 0..m {
            let z = linalg::normal_vector(n, &mut rng);
            let g = &self.basis * z.component_mul(&sqrt);
            grads.row_mut(j).copy_from(&g.transpose());
        }
        Ok(GradientBatch {
            grads,
            damping: self.damping,
        })
    }

    /// Restricts `F + gamma I` to the surviving coordinates, inverts densely,
    /// and re-embeds as an `n x n` matrix that is zero outside survivors.
    pub fn masked_inverse(&self, mask: &[bool]) -> Result<DMatrix<f64>> {
        masked_inverse(&self.dense(), mask)
    }
}

/// A batch of per-example score gradients (rows), with the damping of the
/// estimation target it feeds.
#[derive(Debug, Clone)]
pub struct GradientBatch {
    grads: DMatrix<f64>,
    damping: f64,
}

impl GradientBatch {
    pub fn new(grads: DMatrix<f64>, damping: f64) -> Self {
        Self { grads, damping }
    }

    pub fn count(&self) -> usize {
        self.grads.nrows()
    }

    pub fn dim(&self) -> usize {
        self.grads.ncols()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn gradients(&self) -> &DMatrix<f64> {
        &self.grads
    }

    /// `(1/m) G'(G v) + gamma v` without materializing `G'G`. Unbiased
    /// estimator of the exact damped Fisher-vector product.
    pub fn empirical_fvp(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "empirical_fvp",
                expected: self.dim(),
                got: v.len(),
            });
        }
        let gv = &self.grads * v;
        Ok(self.grads.transpose() * gv / self.count() as f64 + v * self.damping)
    }

    /// `(1/m) G'G`, materialized (baselines only).
    pub fn gram(&self) -> DMatrix<f64> {
        self.grads.transpose() * &self.grads / self.count() as f64
    }

    /// Zeroes the columns of pruned coordinates, so the batch estimates the
    /// Fisher of the masked model.
    pub fn masked(&self, mask: &[bool]) -> GradientBatch {
        assert_eq!(mask.len(), self.dim());
        let mut grads = self.grads.clone();
        for (j, alive) in mask.iter().enumerate() {
            if !alive {
                grads.column_mut(j).fill(0.0);
            }
        }
        GradientBatch {
            grads,
            damping: self.damping,
        }
    }
}

/// Linear regression task `y = w'x + sigma * eps` with `x ~ N(0, Sigma_x)`.
/// The score-gradient Fisher of the task is exactly `Sigma_x`.
#[derive(Debug, Clone)]
pub struct LinearTask {
    weights: DVector<f64>,
    input_cov: SpectralFisher,
    noise: f64,
    batch: usize,
}

impl LinearTask {
    /// Samples true weights from `N(0, 1/n)` and adopts `input_cov`'s
    /// undamped matrix as `Sigma_x` (its damping is the estimation target's).
    pub fn new(input_cov: SpectralFisher, noise: f64, batch: usize, seed: u64) -> Result<Self> {
        if noise < 0.0 {
            return Err(CoreError::invalid("noise scale must be non-negative"));
        }
        if batch == 0 {
            return Err(CoreError::invalid("batch size must be at least 1"));
        }
        let n = input_cov.dim();
        let mut rng = linalg::seeded_rng(seed, 2);
        let scale = (1.0 / n as f64).sqrt();
        let weights = linalg::normal_vector(n, &mut rng) * scale;
        Ok(Self {
            weights,
            input_cov,
            noise,
            batch,
        })
    }

    pub fn dim(&self) -> usize {
        self.input_cov.dim()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// The task Fisher (`Sigma_x`) together with the damping used by
    /// estimators targeting `(Sigma_x + gamma I)^{-1}`.
    pub fn fisher(&self) -> &SpectralFisher {
        &self.input_cov
    }

    fn sample_inputs(&self, count: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let n = self.dim();
        let sqrt = self.input_cov.eigenvalues().map(f64::sqrt);
        let mut x = DMatrix::zeros(count, n);
        for j in 0..count {
            let z = linalg::normal_vector(n, rng);
            let xi = self.input_cov.basis() * z.component_mul(&sqrt);
            x.row_mut(j).copy_from(&xi.transpose());
        }
        x
    }

    /// Per-example score gradients `g_j = x_j * eps_j` with `eps ~ N(0, 1)`,
    /// so `E[(1/m) G'G] = Sigma_x` regardless of the weights.
    pub fn sample_gradient_batch(&self, seed: u64) -> GradientBatch {
        self.sample_gradient_batch_sized(self.batch, seed)
    }

    /// Same sampling with an explicit batch size (rank-limited estimators).
    pub fn sample_gradient_batch_sized(&self, m: usize, seed: u64) -> GradientBatch {
        let mut rng = linalg::seeded_rng(seed, 3);
        let x = self.sample_inputs(m, &mut rng);
        let mut grads = x;
        for j in 0..grads.nrows() {
            let eps: f64 = rng.sample(StandardNormal);
            grads.row_mut(j).scale_mut(eps);
        }
        GradientBatch {
            grads,
            damping: self.input_cov.damping(),
        }
    }

    /// Supervised dataset `(X, y)` with `y = X w* + sigma * eps`.
    pub fn sample_dataset(&self, count: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = linalg::seeded_rng(seed, 4);
        let x = self.sample_inputs(count, &mut rng);
        let noise = linalg::normal_vector(count, &mut rng) * self.noise;
        let y = &x * &self.weights + noise;
        (x, y)
    }

    /// Held-out test set of `10 n` examples.
    pub fn test_set(&self, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        self.sample_dataset(10 * self.dim(), seed ^ 0x7e57)
    }

    /// Mean squared prediction error of `w` on `(X, y)`.
    pub fn mse(&self, w: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let r = x * w - y;
        r.norm_squared() / y.len() as f64
    }

    /// Gradient of the half-MSE loss: `(1/m) X'(X w - y)`.
    pub fn loss_gradient(&self, w: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let r = x * w - y;
        x.transpose() * r / y.len() as f64
    }
}

/// Restricts a dense damped Fisher to the surviving rows/columns, inverts the
/// submatrix, and re-embeds as an `n x n` matrix zero outside survivors.
pub fn masked_inverse(f_damped: &DMatrix<f64>, mask: &[bool]) -> Result<DMatrix<f64>> {
    let n = f_damped.nrows();
    if mask.len() != n {
        return Err(CoreError::DimensionMismatch {
            context: "masked_inverse",
            expected: n,
            got: mask.len(),
        });
    }
    let alive: Vec<usize> = (0..n).filter(|i| mask[*i]).collect();
    if alive.is_empty() {
        return Err(CoreError::invalid("mask has no surviving coordinates"));
    }
    let sub = extract_submatrix(f_damped, &alive);
    let inv = linalg::spd_inverse(&sub)?;
    let mut out = DMatrix::zeros(n, n);
    for (a, &i) in alive.iter().enumerate() {
        for (b, &j) in alive.iter().enumerate() {
            out[(i, j)] = inv[(a, b)];
        }
    }
    Ok(out)
}

/// Rows/columns of `m` at `indices`, as a dense submatrix.
pub fn extract_submatrix(m: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(indices.len(), indices.len(), |a, b| m[(indices[a], indices[b])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, seeded_rng};

    #[test]
    fn spectrum_parsing_round_trips() {
        assert_eq!("power:2".parse::<Spectrum>().unwrap(), Spectrum::Power(2.0));
        assert_eq!("exp:30".parse::<Spectrum>().unwrap(), Spectrum::ExpDecay(30.0));
        assert_eq!(
            "list:[1, 0.5, 0.25]".parse::<Spectrum>().unwrap(),
            Spectrum::Explicit(vec![1.0, 0.5, 0.25])
        );
        assert!("poly:3".parse::<Spectrum>().is_err());
        assert!("list:[1, -2]".parse::<Spectrum>().unwrap().eigenvalues(2).is_err());
    }

    #[test]
    fn power_spectrum_inverse_eigenvalue_range() {
        // xi_i = 1/i^2 with gamma = 1e-3: inverse eigenvalues span roughly [1, 1000].
        let f = SpectralFisher::new(100, &Spectrum::Power(2.0), 1e-3, 0).unwrap();
        let inv = f.inverse_eigenvalues();
        let lo = inv.min();
        let hi = inv.max();
        assert!((lo - 1.0 / 1.001).abs() < 1e-12);
        assert!(hi > 900.0 && hi < 1000.0, "largest inverse eigenvalue {hi}");
    }

    #[test]
    fn identity_spectrum_gives_identity() {
        let f = SpectralFisher::new(3, &Spectrum::Explicit(vec![1.0, 1.0, 1.0]), 0.0, 42).unwrap();
        let err = max_abs(&(f.dense() - DMatrix::identity(3, 3)));
        assert!(err < 1e-12, "identity defect {err}");
    }

    #[test]
    fn exp_decay_inverse_eigenvalues_match_direct_evaluation() {
        let n = 100;
        let c = 30.0;
        let gamma = 0.01;
        let f = SpectralFisher::new(n, &Spectrum::ExpDecay(c), gamma, 5).unwrap();
        let inv = f.inverse_eigenvalues();
        // Direct evaluation of 1/(xi_i + gamma).
        let direct: Vec<f64> = (0..n).map(|i| 1.0 / ((-(i as f64) / c).exp() + gamma)).collect();
        for (a, b) in inv.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((inv.min() - 1.0 / 1.01).abs() < 1e-12);
        let expected_max = 1.0 / ((-99.0f64 / 30.0).exp() + 0.01);
        assert!((inv.max() - expected_max).abs() < 1e-12);
    }

    #[test]
    fn construction_is_deterministic_and_orthonormal() {
        let a = SpectralFisher::new(30, &Spectrum::Power(2.0), 1e-3, 9).unwrap();
        let b = SpectralFisher::new(30, &Spectrum::Power(2.0), 1e-3, 9).unwrap();
        assert_eq!(a.basis(), b.basis());
        let defect = max_abs(&(a.basis().transpose() * a.basis() - DMatrix::identity(30, 30)));
        assert!(defect < 1e-10);
    }

    #[test]
    fn rejects_negative_explicit_eigenvalue() {
        let err = SpectralFisher::new(2, &Spectrum::Explicit(vec![1.0, -0.1]), 0.1, 0);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_singular_undamped_explicit() {
        let err = SpectralFisher::new(2, &Spectrum::Explicit(vec![1.0, 0.0]), 0.0, 0);
        assert!(err.is_err());
    }

    #[test]
    fn fvp_identity_and_eigenvector_cases() {
        let f = SpectralFisher::new(4, &Spectrum::Explicit(vec![1.0; 4]), 0.0, 3).unwrap();
        let mut rng = seeded_rng(11, 5);
        let v = linalg::normal_vector(4, &mut rng);
        let fv = f.fvp(&v).unwrap();
        assert!((fv - &v).norm() < 1e-12);

        let f = SpectralFisher::new(5, &Spectrum::Power(2.0), 0.5, 3).unwrap();
        for i in 0..5 {
            let u_i: DVector<f64> = f.basis().column(i).into();
            let fv = f.fvp(&u_i).unwrap();
            let expected = &u_i * (f.eigenvalues()[i] + 0.5);
            assert!((fv - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn fvp_matches_dense_oracle_and_is_symmetric() {
        let f = SpectralFisher::new(5, &Spectrum::ExpDecay(2.0), 0.1, 17).unwrap();
        let dense = f.dense();
        let mut rng = seeded_rng(17, 6);
        for _ in 0..10 {
            let v = linalg::normal_vector(5, &mut rng);
            let u = linalg::normal_vector(5, &mut rng);
            let fv = f.fvp(&v).unwrap();
            assert!((&fv - &dense * &v).norm() < 1e-12);
            // u'(Fv) = v'(Fu)
            let fu = f.fvp(&u).unwrap();
            assert!((u.dot(&fv) - v.dot(&fu)).abs() < 1e-10);
        }
    }

    #[test]
    fn fvp_rejects_dimension_mismatch() {
        let f = SpectralFisher::new(4, &Spectrum::Power(1.0), 0.1, 0).unwrap();
        assert!(f.fvp(&DVector::zeros(5)).is_err());
    }

    fn toy_task(n: usize, m: usize, seed: u64) -> LinearTask {
        let cov = SpectralFisher::new(n, &Spectrum::ExpDecay(10.0), 0.01, seed).unwrap();
        LinearTask::new(cov, 0.1, m, seed).unwrap()
    }

    #[test]
    fn gradient_batch_is_deterministic() {
        let task = toy_task(6, 12, 1);
        let a = task.sample_gradient_batch(99);
        let b = task.sample_gradient_batch(99);
        assert_eq!(a.gradients(), b.gradients());
        let c = task.sample_gradient_batch(100);
        assert_ne!(a.gradients(), c.gradients());
    }

    #[test]
    fn gradient_second_moment_matches_diagonal_covariance() {
        // Sigma_x = diag(1, .5, .25, .125): empirical diagonal of (1/m) G'G
        // within 3 standard errors at m = 1e5.
        let cov = SpectralFisher::from_parts(
            DMatrix::identity(4, 4),
            DVector::from_vec(vec![1.0, 0.5, 0.25, 0.125]),
            0.01,
        )
        .unwrap();
        let task = LinearTask::new(cov, 0.1, 100_000, 7).unwrap();
        let batch = task.sample_gradient_batch(3);
        let gram = batch.gram();
        for i in 0..4 {
            let target = task.fisher().eigenvalues()[i];
            // Var(x_i^2 eps^2) = E[x^4]E[eps^4] - target^2 = 9 target^2 - target^2.
            let se = (8.0f64 * target * target / 100_000.0).sqrt();
            let diff = (gram[(i, i)] - target).abs();
            assert!(diff < 3.0 * se, "diag {i}: diff {diff}, 3se {}", 3.0 * se);
        }
    }

    #[test]
    fn isotropic_gram_approaches_identity() {
        let cov = SpectralFisher::new(3, &Spectrum::Explicit(vec![1.0; 3]), 0.0, 2).unwrap();
        let task = LinearTask::new(cov, 0.1, 60_000, 5).unwrap();
        let gram = task.sample_gradient_batch(8).gram();
        let err = max_abs(&(gram - DMatrix::identity(3, 3)));
        assert!(err < 0.05, "isotropic limit defect {err}");
    }

    #[test]
    fn empirical_fvp_zero_and_rank_one_cases() {
        let gamma = 0.3;
        let zero = GradientBatch::new(DMatrix::zeros(4, 3), gamma);
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let out = zero.empirical_fvp(&v).unwrap();
        assert!((out - &v * gamma).norm() < 1e-15);

        let g = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let single = GradientBatch::new(DMatrix::from_rows(&[g.transpose()]), gamma);
        let out = single.empirical_fvp(&v).unwrap();
        let expected = &g * g.dot(&v) + &v * gamma;
        assert!((out - expected).norm() < 1e-12);
    }

    #[test]
    fn empirical_fvp_matches_dense_oracle() {
        let task = toy_task(5, 20, 21);
        let batch = task.sample_gradient_batch(0);
        let dense = batch.gram() + DMatrix::identity(5, 5) * batch.damping();
        let mut rng = seeded_rng(2, 7);
        let v = linalg::normal_vector(5, &mut rng);
        let out = batch.empirical_fvp(&v).unwrap();
        assert!((out - dense * &v).norm() < 1e-12);
    }

    #[test]
    fn empirical_fvp_error_decays_as_inverse_sqrt_batches() {
        // Averaging K independent empirical fvp outputs converges to the exact
        // product at O(1/sqrt(K)): log-log slope within +-0.15 of -0.5.
        let task = toy_task(6, 8, 13);
        let mut rng = seeded_rng(40, 8);
        let v = linalg::normal_vector(6, &mut rng);
        let exact = task.fisher().fvp(&v).unwrap();
        let ks = [4usize, 16, 64, 256];
        let reps = 24;
        let mut seed = 0u64;
        let mean_err: Vec<f64> = ks
            .iter()
            .map(|&k| {
                let mut total = 0.0;
                for _ in 0..reps {
                    let mut acc = DVector::zeros(6);
                    for _ in 0..k {
                        acc += task.sample_gradient_batch(seed).empirical_fvp(&v).unwrap();
                        seed += 1;
                    }
                    total += (acc / k as f64 - &exact).norm();
                }
                total / reps as f64
            })
            .collect();
        // OLS slope of log(err) against log(K).
        let xs: Vec<f64> = ks.iter().map(|k| (*k as f64).ln()).collect();
        let ys: Vec<f64> = mean_err.iter().map(|e| e.ln()).collect();
        let xm = xs.iter().sum::<f64>() / xs.len() as f64;
        let ym = ys.iter().sum::<f64>() / ys.len() as f64;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - xm) * (y - ym))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
        assert!(
            (slope + 0.5).abs() < 0.15,
            "convergence slope {slope}, expected about -0.5"
        );
    }

    #[test]
    fn masked_inverse_trivial_cases() {
        // Full mask on the identity.
        let eye = DMatrix::identity(3, 3);
        let inv = masked_inverse(&eye, &[true, true, true]).unwrap();
        assert!(max_abs(&(inv - DMatrix::identity(3, 3))) < 1e-14);

        // Keep coordinate 0 only of diag(2, 3).
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let inv = masked_inverse(&d, &[true, false]).unwrap();
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-14);
        assert_eq!(inv[(1, 1)], 0.0);
        assert_eq!(inv[(0, 1)], 0.0);
    }

    #[test]
    fn masked_inverse_matches_submatrix_oracle_and_inverts_on_subspace() {
        let mut rng = seeded_rng(31, 9);
        let f = linalg::random_spd(6, 0.2, 3.0, &mut rng);
        let mask = [true, false, true, true, false, true];
        let inv = masked_inverse(&f, &mask).unwrap();

        let alive: Vec<usize> = (0..6).filter(|i| mask[*i]).collect();
        let sub = extract_submatrix(&f, &alive);
        let sub_inv = sub.clone().try_inverse().unwrap();
        let emb = extract_submatrix(&inv, &alive);
        assert!(max_abs(&(&emb - &sub_inv)) < 1e-10);

        // Identity on the surviving subspace.
        let prod = emb * sub;
        let err = max_abs(&(prod - DMatrix::identity(4, 4)));
        assert!(err < 1e-9, "subspace identity defect {err}");
    }

    #[test]
    fn masked_inverse_rejects_empty_mask() {
        let eye = DMatrix::identity(2, 2);
        assert!(masked_inverse(&eye, &[false, false]).is_err());
    }

    #[test]
    fn masked_batch_zeroes_pruned_columns() {
        let task = toy_task(4, 6, 3);
        let batch = task.sample_gradient_batch(0).masked(&[true, false, true, false]);
        for j in [1usize, 3] {
            assert!(batch.gradients().column(j).iter().all(|x| *x == 0.0));
        }
    }
}
