//! Small dense linear-algebra helpers shared across modules.
//!
//! Matrices are `nalgebra` dynamic matrices in 64-bit precision. Sampling
//! helpers take an explicit RNG so that every caller is reproducible from a
//! `(seed, stream)` pair.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic RNG for a `(seed, stream)` pair. Streams keep independent
/// consumers (weights, minibatches, probe vectors, ...) decoupled so that
/// drawing more samples in one place never shifts another.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Row-major fill so that reshaping conventions stay obvious in tests.
pub fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Random orthonormal matrix: QR of a Gaussian matrix, with column signs
/// fixed so the factorization is unique (positive diagonal of R).
pub fn random_orthonormal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = normal_matrix(n, n, rng);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Random SPD matrix with eigenvalues drawn uniformly from `[lo, hi]`.
pub fn random_spd(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    assert!(lo > 0.0 && hi >= lo);
    let u = random_orthonormal(n, rng);
    let evals = DVector::from_fn(n, |_, _| rng.gen_range(lo..=hi));
    &u * DMatrix::from_diagonal(&evals) * u.transpose()
}

/// Reshape a vector of length `rows * cols` into a matrix, row-major.
pub fn unvec_row_major(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), rows * cols);
    DMatrix::from_fn(rows, cols, |i, j| v[i * cols + j])
}

/// Flatten a matrix into a vector, row-major.
pub fn vec_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = m.shape();
    DVector::from_fn(rows * cols, |k, _| m[(k / cols, k % cols)])
}

/// Kronecker product of vectors under the row-major pairing:
/// `out[i * len(b) + k] = a[i] * b[k]`.
pub fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let nb = b.len();
    DVector::from_fn(a.len() * nb, |k, _| a[k / nb] * b[k % nb])
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> crate::Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| crate::CoreError::Singular("Cholesky factorization failed".into()))
}
