//! Smooth unconstrained-to-positive map for diagonal parameters.
//!
//! Softplus keeps the flat parameter vector unconstrained for the optimizer
//! while guaranteeing strictly positive Cholesky diagonals and D entries.
//! Both directions are evaluated in the numerically stable log1p form, so the
//! round trip is accurate from ~1e-300 up to arbitrarily large values.

/// `softplus(x) = ln(1 + e^x)`, computed without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: `x = p + ln(1 - e^{-p})` for `p > 0`.
pub fn softplus_inv(p: f64) -> f64 {
    assert!(p > 0.0, "softplus_inv requires a positive input, got {p}");
    p + (-(-p).exp()).ln_1p()
}

/// Derivative of [`softplus`]: the logistic sigmoid.
pub fn softplus_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
