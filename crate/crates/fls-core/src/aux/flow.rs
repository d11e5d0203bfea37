//! Idealized dynamics of auxiliary-loss gradient descent.
//!
//! For the deterministic loss `A(Q) = 1/2 Tr(Q F_gamma Q) - Tr(Q)` minimized
//! directly over an unconstrained matrix `Q` with `Q(0) = alpha I`, the flow
//! decouples in the Fisher eigenbasis into scalar dynamics
//! `tau_i dbeta_i/dt = -beta_i + beta_i*` with `beta_i* = 1/(xi_i + gamma)`
//! and `tau_i = beta_i* / p_i` under a preconditioner with eigenvalues `p_i`.
//! This module provides both the closed-form solution and a small-step
//! simulator used to validate it.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::fisher::SpectralFisher;

/// Closed-form eigenvalues of `Q(t)`:
/// `beta_i(t) = beta_i* + (alpha - beta_i*) exp(-t / tau_i)` with
/// `beta_i* = 1/(xi_i + gamma)` and `tau_i = beta_i* / p_i`.
pub fn closed_form_eigenvalues(
    eigenvalues: &DVector<f64>,
    gamma: f64,
    alpha: f64,
    preconditioner: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    if eigenvalues.len() != preconditioner.len() {
        return Err(CoreError::DimensionMismatch {
            context: "closed_form_eigenvalues",
            expected: eigenvalues.len(),
            got: preconditioner.len(),
        });
    }
    if eigenvalues.iter().any(|x| *x < 0.0) || gamma <= 0.0 {
        return Err(CoreError::invalid("need xi_i >= 0 and gamma > 0"));
    }
    if preconditioner.iter().any(|p| *p <= 0.0) {
        return Err(CoreError::invalid("preconditioner eigenvalues must be positive"));
    }
    Ok(DVector::from_fn(eigenvalues.len(), |i, _| {
        let target = 1.0 / (eigenvalues[i] + gamma);
        let tau = target / preconditioner[i];
        target + (alpha - target) * (-t / tau).exp()
    }))
}

/// Trajectory snapshots from the matrix-space simulator.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    /// Continuous times `t = step * eta` of each snapshot.
    pub times: Vec<f64>,
    /// Eigenvalues of `Q` in the Fisher eigenbasis at each snapshot.
    pub eigenvalues: Vec<DVector<f64>>,
    /// Largest off-diagonal magnitude of `U' Q U` at each snapshot; stays at
    /// rounding level because the flow preserves diagonality.
    pub offdiag_max: Vec<f64>,
}

/// Small-step gradient descent on the deterministic loss, directly over the
/// unconstrained matrix `Q`: `Q <- Q - eta (F_gamma Q - I)`, `Q(0) = alpha I`.
///
/// Snapshots record the diagonal of `U' Q U`, which the decoupling argument
/// says carries the whole state.
pub fn simulate_matrix_descent(
    fisher: &SpectralFisher,
    alpha: f64,
    eta: f64,
    steps: usize,
    snapshot_every: usize,
) -> Result<FlowTrace> {
    if alpha <= 0.0 || eta <= 0.0 {
        return Err(CoreError::invalid("alpha and eta must be positive"));
    }
    if snapshot_every == 0 {
        return Err(CoreError::invalid("snapshot_every must be at least 1"));
    }
    let n = fisher.dim();
    let f = fisher.dense();
    let eye = DMatrix::identity(n, n);
    let mut q = DMatrix::identity(n, n) * alpha;

    let mut trace = FlowTrace {
        times: Vec::new(),
        eigenvalues: Vec::new(),
        offdiag_max: Vec::new(),
    };
    let snap = |step: usize, q: &DMatrix<f64>, trace: &mut FlowTrace| {
        let projected = fisher.basis().transpose() * q * fisher.basis();
        let mut off = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off = off.max(projected[(i, j)].abs());
                }
            }
        }
        trace.times.push(step as f64 * eta);
        trace.eigenvalues.push(projected.diagonal());
        trace.offdiag_max.push(off);
    };

    snap(0, &q, &mut trace);
    for step in 1..=steps {
        let grad = &f * &q - &eye;
        q -= grad * eta;
        if step % snapshot_every == 0 || step == steps {
            snap(step, &q, &mut trace);
        }
    }
    Ok(trace)
}
