//! Scalar normal density and distribution functions, plus the reflected
//! ("adjusted") variants used to keep constraint gradients alive on the left
//! half-line.

use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "standard deviation must be positive, got {sigma}"
        )))
    }
}

/// Standard normal density.
#[inline]
pub fn std_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function, `0.5 * erfc(-x / sqrt(2))`.
#[inline]
pub fn std_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Inverse of [`std_cdf`]. Arguments are clamped into the open unit interval
/// so the result stays finite (|x| <= ~37.5).
#[inline]
pub fn std_quantile(p: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

pub fn normal_pdf(z: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(std_pdf((z - mu) / sigma) / sigma)
}

pub fn normal_cdf(z: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(std_cdf((z - mu) / sigma))
}

/// Density reflected about the mean on the left half-line:
/// `2 f(mu) - f(2 mu - z)` for `z < mu`, the ordinary density otherwise.
/// Tends to `2 f(mu)` as `z -> -inf` instead of vanishing.
pub fn adjusted_pdf(z: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(adjusted_pdf_unchecked(z, mu, sigma))
}

/// Distribution function reflected about the mean: `F(2 mu - z)` for `z < mu`.
pub fn adjusted_cdf(z: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(std_cdf((reflect_below(z, mu) - mu) / sigma))
}

/// Maps `z` to `2 mu - z` when it lies below `mu`.
#[inline]
pub fn reflect_below(z: f64, mu: f64) -> f64 {
    if z < mu {
        2.0 * mu - z
    } else {
        z
    }
}

#[inline]
pub(crate) fn adjusted_pdf_unchecked(z: f64, mu: f64, sigma: f64) -> f64 {
    let t = (z - mu) / sigma;
    if t >= 0.0 {
        std_pdf(t) / sigma
    } else {
        (2.0 * FRAC_1_SQRT_2PI - std_pdf(-t)) / sigma
    }
}
