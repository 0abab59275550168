//! Scalar helpers shared by the tape and the reference code in tests.
//!
//! Without the `std` feature everything goes through `libm`. With it, `exp`
//! and `ln` use the platform implementation, which is faster but may differ
//! from `libm` in the last bit.

/// Floor applied before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Added to every Euclidean norm used as a divisor.
pub const NORM_EPS: f64 = 1e-12;

#[cfg(feature = "std")]
#[inline]
pub fn exp(x: f64) -> f64 {
    x.exp()
}

#[cfg(not(feature = "std"))]
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[cfg(feature = "std")]
#[inline]
pub fn ln(x: f64) -> f64 {
    x.ln()
}

#[cfg(not(feature = "std"))]
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// Natural log with the input floored at [`LOG_FLOOR`].
#[inline]
pub fn guarded_ln(x: f64) -> f64 {
    ln(x.max(LOG_FLOOR))
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(exp(-x.abs()))
}

/// Inverse of [`softplus`] for positive `y`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    y + libm::log(-libm::expm1(-y))
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}
