//! Scalar math shared by the tensor ops and the inference engines.

use core::f64::consts::{FRAC_1_SQRT_2, PI};

/// Variances are clamped to at least this value before any division or CDF.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

// The platform math library is considerably faster than the portable
// implementations and is used whenever std is available.
#[cfg(feature = "std")]
mod imp {
    #[inline]
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    #[inline]
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    #[inline]
    pub fn ln_1p(x: f64) -> f64 {
        x.ln_1p()
    }
    #[inline]
    pub fn tanh(x: f64) -> f64 {
        x.tanh()
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub use libm::{exp, log as ln, log1p as ln_1p, tanh};
}

pub use imp::{exp, ln, ln_1p, tanh};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -ln_1p(exp(-x))
    } else {
        x - ln_1p(exp(x))
    }
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    exp(-0.5 * z * z) / libm::sqrt(2.0 * PI)
}

/// `P(a < 0)` for `a ~ N(mean, var)`, i.e. `0.5 * erfc(mean / (sigma * sqrt 2))`.
#[inline]
pub fn gaussian_cdf_at_zero(mean: f64, var: f64) -> f64 {
    let sd = libm::sqrt(var.max(VARIANCE_FLOOR));
    0.5 * libm::erfc(mean / sd * FRAC_1_SQRT_2)
}

/// Partial derivatives of [`gaussian_cdf_at_zero`] with respect to the mean
/// and the variance. The variance derivative is zero below the floor.
#[inline]
pub fn gaussian_cdf_at_zero_grad(mean: f64, var: f64) -> (f64, f64) {
    let clamped = var < VARIANCE_FLOOR;
    let v = var.max(VARIANCE_FLOOR);
    let sd = libm::sqrt(v);
    let z = mean / sd;
    let pdf = normal_pdf(z);
    let d_mean = -pdf / sd;
    let d_var = if clamped { 0.0 } else { pdf * mean / (2.0 * v * sd) };
    (d_mean, d_var)
}

/// Deterministic binarization: `+1` for `a >= 0`, `-1` otherwise.
#[inline]
pub fn sign(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        -1.0
    }
}
