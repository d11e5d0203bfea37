//! Distances and error measures between SPD matrices and operators.
//!
//! The affine-invariant Riemannian distance is computed through symmetric
//! eigendecompositions rather than iterative square roots, which stays
//! robust up to condition numbers around 1e6.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::fisher::{extract_submatrix, SpectralFisher};
use crate::linalg;

/// One named measurement with its position in a run.
#[derive(Debug, Clone)]
pub struct MetricSample {
    pub name: &'static str,
    pub value: f64,
    pub step: usize,
    pub minibatches: usize,
}

impl MetricSample {
    pub fn checked(name: &'static str, value: f64, step: usize, minibatches: usize) -> Result<Self> {
        if !value.is_finite() {
            return Err(CoreError::invalid(format!("metric '{name}' is not finite: {value}")));
        }
        Ok(Self {
            name,
            value,
            step,
            minibatches,
        })
    }
}

/// Eigendecomposition of a symmetric matrix with a positivity check.
fn spd_eigen(m: &DMatrix<f64>, what: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eig = linalg::symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
        return Err(CoreError::NotPositiveDefinite(format!(
            "{what} has a non-positive eigenvalue ({:.3e})",
            eig.eigenvalues.min()
        )));
    }
    Ok((eig.eigenvalues, eig.eigenvectors))
}

/// Affine-invariant Riemannian distance between SPD matrices:
/// `|| log(A^{-1/2} B A^{-1/2}) ||_F`.
pub fn riemannian_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() || a.nrows() != a.ncols() {
        return Err(CoreError::DimensionMismatch {
            context: "riemannian_distance",
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    let (evals, evecs) = spd_eigen(a, "first argument")?;
    let inv_sqrt = evals.map(|v| 1.0 / v.sqrt());
    let a_inv_sqrt = &evecs * DMatrix::from_diagonal(&inv_sqrt) * evecs.transpose();
    let c = &a_inv_sqrt * b * &a_inv_sqrt;
    let (cvals, _) = spd_eigen(&c, "whitened product")?;
    Ok(cvals.iter().map(|v| v.ln().powi(2)).sum::<f64>().sqrt())
}

/// How probe vectors are weighted in [`normalized_action_error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionWeighting {
    /// `u ~ N(0, I)`.
    Isotropic,
    /// `u ~ N(0, F^{-1})` (undamped), emphasizing the least salient
    /// parameter directions.
    InverseFisher,
}

/// Monte-Carlo estimate of `E ||Qu - F_gamma^{-1} u||^2 / E ||F_gamma^{-1} u||^2`
/// over `u ~ N(0, Sigma_u)`.
pub fn normalized_action_error(
    apply_q: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    fisher: &SpectralFisher,
    weighting: ActionWeighting,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(CoreError::invalid("need at least one sample"));
    }
    let n = fisher.dim();
    if weighting == ActionWeighting::InverseFisher && fisher.eigenvalues()[n - 1] <= 0.0 {
        return Err(CoreError::NotPositiveDefinite(
            "inverse-Fisher weighting needs an invertible undamped Fisher".into(),
        ));
    }
    let inv_eigs = fisher.inverse_eigenvalues();
    let mut rng = linalg::seeded_rng(seed, 30);
    let mut num = 0.0;
    let mut den = 0.0;
    for _ in 0..samples {
        let z = linalg::normal_vector(n, &mut rng);
        let u = match weighting {
            ActionWeighting::Isotropic => z,
            ActionWeighting::InverseFisher => {
                let half = fisher.eigenvalues().map(|x| 1.0 / x.sqrt());
                fisher.basis() * z.component_mul(&half)
            }
        };
        // Reference action through the eigendecomposition, exact.
        let proj = fisher.basis().transpose() * &u;
        let reference = fisher.basis() * proj.component_mul(&inv_eigs);
        let qu = apply_q(&u);
        num += (&qu - &reference).norm_squared();
        den += reference.norm_squared();
    }
    if den == 0.0 {
        return Err(CoreError::Singular("reference action has zero norm".into()));
    }
    Ok(num / den)
}

/// Restricts `dense(Q)` and the exact masked inverse of `F_gamma` to the
/// surviving coordinates and returns their Riemannian distance.
pub fn masked_riemannian_distance(
    q_dense: &DMatrix<f64>,
    fisher: &SpectralFisher,
    mask: &[bool],
) -> Result<f64> {
    let n = fisher.dim();
    if q_dense.nrows() != n || mask.len() != n {
        return Err(CoreError::DimensionMismatch {
            context: "masked_riemannian_distance",
            expected: n,
            got: q_dense.nrows().min(mask.len()),
        });
    }
    let alive: Vec<usize> = (0..n).filter(|i| mask[*i]).collect();
    if alive.is_empty() {
        return Err(CoreError::invalid("mask has no surviving coordinates"));
    }
    let q_sub = extract_submatrix(q_dense, &alive);
    let f_sub = extract_submatrix(&fisher.dense(), &alive);
    let f_sub_inv = linalg::spd_inverse(&f_sub)?;
    riemannian_distance(&q_sub, &f_sub_inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::Spectrum;
    use crate::linalg::{random_spd, seeded_rng};

    #[test]
    fn distance_of_matrix_to_itself_is_zero() {
        let mut rng = seeded_rng(1, 0);
        let a = random_spd(6, 0.1, 5.0, &mut rng);
        let d = riemannian_distance(&a, &a).unwrap();
        assert!(d < 1e-7, "self distance {d}");
    }

    #[test]
    fn distance_identity_to_scaled_identity() {
        // d(I, cI) = sqrt(n) |log c|.
        let n = 7;
        let c = 3.5f64;
        let a = DMatrix::identity(n, n);
        let b = DMatrix::identity(n, n) * c;
        let d = riemannian_distance(&a, &b).unwrap();
        let expected = (n as f64).sqrt() * c.ln().abs();
        assert!((d - expected).abs() < 1e-10);
    }

    #[test]
    fn distance_matches_generalized_eigenvalue_oracle() {
        // d^2 = sum log^2 eigenvalues of A^{-1} B.
        let mut rng = seeded_rng(5, 1);
        let a = random_spd(5, 0.2, 4.0, &mut rng);
        let b = random_spd(5, 0.2, 4.0, &mut rng);
        let d = riemannian_distance(&a, &b).unwrap();

        let m = a.clone().try_inverse().unwrap() * &b;
        // A^{-1}B is similar to the symmetric whitened product, so its
        // eigenvalues are real and positive; take complex magnitudes.
        let expected = m
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm().ln().powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d - expected).abs() < 1e-9, "{d} vs {expected}");
    }

    #[test]
    fn distance_is_symmetric_congruence_and_inversion_invariant() {
        let mut rng = seeded_rng(9, 2);
        let a = random_spd(8, 0.3, 3.0, &mut rng);
        let b = random_spd(8, 0.3, 3.0, &mut rng);
        let d = riemannian_distance(&a, &b).unwrap();

        let d_sym = riemannian_distance(&b, &a).unwrap();
        assert!((d - d_sym).abs() < 1e-8);

        // Congruence by a random invertible X.
        let x = crate::linalg::normal_matrix(8, 8, &mut rng) + DMatrix::identity(8, 8) * 3.0;
        let xa = x.transpose() * &a * &x;
        let xb = x.transpose() * &b * &x;
        let d_cong = riemannian_distance(&xa, &xb).unwrap();
        assert!((d - d_cong).abs() < 1e-8, "congruence defect {}", (d - d_cong).abs());

        let d_inv = riemannian_distance(
            &a.clone().try_inverse().unwrap(),
            &b.clone().try_inverse().unwrap(),
        )
        .unwrap();
        assert!((d - d_inv).abs() < 1e-8, "inversion defect {}", (d - d_inv).abs());
    }

    #[test]
    fn distance_rejects_non_spd() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        let b = DMatrix::identity(2, 2);
        assert!(riemannian_distance(&a, &b).is_err());
    }

    #[test]
    fn action_error_zero_for_exact_inverse_one_for_zero() {
        let f = SpectralFisher::new(10, &Spectrum::ExpDecay(5.0), 0.01, 3).unwrap();
        let inv = f.dense_inverse();
        let err = normalized_action_error(&|v| &inv * v, &f, ActionWeighting::InverseFisher, 500, 0)
            .unwrap();
        assert!(err < 1e-20, "exact inverse error {err}");

        let zero =
            normalized_action_error(&|v| v * 0.0, &f, ActionWeighting::Isotropic, 500, 0).unwrap();
        assert!((zero - 1.0).abs() < 1e-12, "zero operator error {zero}");
    }

    #[test]
    fn action_error_matches_closed_form_trace_oracle() {
        // Monte-Carlo vs Tr((Q - Finv) Su (Q - Finv)) / Tr(Finv Su Finv)
        // within a 3-sigma band, for a diagonal truncation of Finv.
        let f = SpectralFisher::new(10, &Spectrum::ExpDecay(5.0), 0.1, 11).unwrap();
        let f_inv = f.dense_inverse();
        let q = DMatrix::from_diagonal(&f_inv.diagonal());

        let samples = 20_000;
        let mc =
            normalized_action_error(&|v| &q * v, &f, ActionWeighting::InverseFisher, samples, 7)
                .unwrap();

        let sigma_u = f.basis()
            * DMatrix::from_diagonal(&f.eigenvalues().map(|x| 1.0 / x))
            * f.basis().transpose();
        let diff = &q - &f_inv;
        let num = (&diff * &sigma_u * &diff).trace();
        let den = (&f_inv * &sigma_u * &f_inv).trace();
        let closed = num / den;

        let tol = 9.0 * closed / (samples as f64).sqrt();
        assert!(
            (mc - closed).abs() < tol.max(1e-3),
            "mc {mc} vs closed form {closed}"
        );
    }

    #[test]
    fn action_error_mc_converges_to_trace_oracle() {
        let f = SpectralFisher::new(8, &Spectrum::Power(2.0), 0.05, 2).unwrap();
        let f_inv = f.dense_inverse();
        let q = DMatrix::from_diagonal(&f_inv.diagonal());
        let sigma_u = DMatrix::identity(8, 8);
        let diff = &q - &f_inv;
        let closed = (&diff * &sigma_u * &diff).trace() / (&f_inv * &sigma_u * &f_inv).trace();

        let mut errs = Vec::new();
        for samples in [256usize, 4096, 65_536] {
            let mc =
                normalized_action_error(&|v| &q * v, &f, ActionWeighting::Isotropic, samples, 3)
                    .unwrap();
            errs.push((mc - closed).abs());
        }
        // 256x more samples should give a clearly smaller error.
        assert!(
            errs[2] < errs[0],
            "errors did not shrink with samples: {errs:?}"
        );
    }

    #[test]
    fn masked_distance_full_mask_equals_plain_distance() {
        let f = SpectralFisher::new(6, &Spectrum::ExpDecay(4.0), 0.05, 5).unwrap();
        let mut rng = seeded_rng(21, 4);
        let q = random_spd(6, 0.5, 2.0, &mut rng);
        let full = masked_riemannian_distance(&q, &f, &[true; 6]).unwrap();
        let plain = riemannian_distance(&q, &f.masked_inverse(&[true; 6]).unwrap()).unwrap();
        assert!((full - plain).abs() < 1e-9);
    }

    #[test]
    fn masked_distance_single_coordinate_scalar_case() {
        let f = SpectralFisher::new(4, &Spectrum::Power(1.0), 0.2, 9).unwrap();
        let mut rng = seeded_rng(23, 5);
        let q = random_spd(4, 0.5, 2.0, &mut rng);
        let mask = [false, false, true, false];
        let d = masked_riemannian_distance(&q, &f, &mask).unwrap();
        let f_dense = f.dense();
        let expected = (q[(2, 2)] * f_dense[(2, 2)]).ln().abs();
        assert!((d - expected).abs() < 1e-10, "{d} vs {expected}");
    }

    #[test]
    fn masked_distance_matches_submatrix_oracle() {
        let f = SpectralFisher::new(20, &Spectrum::ExpDecay(6.0), 0.05, 13).unwrap();
        let mut rng = seeded_rng(29, 6);
        let q = random_spd(20, 0.5, 2.0, &mut rng);
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
        let d = masked_riemannian_distance(&q, &f, &mask).unwrap();

        let alive: Vec<usize> = (0..20).filter(|i| mask[*i]).collect();
        let q_sub = extract_submatrix(&q, &alive);
        let f_sub = extract_submatrix(&f.dense(), &alive);
        let oracle = riemannian_distance(&q_sub, &f_sub.try_inverse().unwrap()).unwrap();
        assert!((d - oracle).abs() < 1e-9);
    }

    #[test]
    fn metric_sample_rejects_nan() {
        assert!(MetricSample::checked("x", f64::NAN, 0, 0).is_err());
        assert!(MetricSample::checked("x", 1.0, 0, 0).is_ok());
    }

    #[test]
    fn action_error_probe_vectors_are_seeded() {
        let f = SpectralFisher::new(6, &Spectrum::Power(2.0), 0.05, 2).unwrap();
        let q = f.dense_inverse() * 0.9;
        let a = normalized_action_error(&|v| &q * v, &f, ActionWeighting::Isotropic, 64, 5).unwrap();
        let b = normalized_action_error(&|v| &q * v, &f, ActionWeighting::Isotropic, 64, 5).unwrap();
        assert_eq!(a, b);
    }
}
