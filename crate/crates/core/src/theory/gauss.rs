//! Gaussian tail `H(x) = ∫_x^∞ Dt` and its inverse.

use crate::error::{Error, Result};

/// `H(x) = P(Z > x)` for a standard normal `Z`, via the complementary error
/// function.
pub fn gaussian_tail_h(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn gaussian_density(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Solves `H(x) = p` by bisection on `[-40, 40]`.
pub fn inverse_h(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("inverse_H needs p in (0, 1), got {p}")));
    }
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi || hi - lo < 1e-14 {
            break;
        }
        // H is decreasing
        if gaussian_tail_h(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
