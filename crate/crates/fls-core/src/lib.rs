//! Estimation of inverse damped Fisher matrices by auxiliary-loss minimization,
//! with second-order (OBS-style) pruning on synthetic linear-Gaussian tasks.
//!
//! The crate is organized around five ingredients:
//!
//! - [`fisher`]: ground-truth Fisher matrices with controlled spectra, linear
//!   tasks whose Fisher is the input covariance, and exact / minibatch
//!   Fisher-vector products.
//! - [`qparam`]: structured positive-definite parameterizations `Q(lambda)`
//!   of the inverse damped Fisher (full Cholesky, positive diagonal,
//!   block-diagonal, Kronecker-factored), all exposing `Qv` products,
//!   `diag(Q)`, flat parameters and analytic vector-Jacobian products.
//! - [`aux`]: minimization of the auxiliary loss
//!   `E_u[(1/2 u'QFQu - u'Qu) / |u|^2]` over the parameterization, with an
//!   optional `P(t) = Q(t)` preconditioner, plus the closed-form gradient
//!   flow used as a dynamics oracle.
//! - [`prune`]: OBS scores and compensated weight deletion, unstructured and
//!   N:M mask selection, sparsity schedules, and the gradual
//!   prune / fine-tune / refine loop.
//! - [`baselines`] and [`metrics`]: comparison estimators (magnitude,
//!   estimate-invert-average, Woodbury block inverses, structured
//!   approximate-then-invert) and SPD error measures.

pub mod aux;
pub mod baselines;
pub mod error;
pub mod fisher;
pub mod linalg;
pub mod metrics;
pub mod prune;
pub mod qparam;

pub use error::{CoreError, Result};
pub use fisher::{GradientBatch, LinearTask, SpectralFisher, Spectrum};
pub use qparam::{QKind, QParameterization};
