//! Digamma, trigamma and log-gamma for positive reals.
//!
//! Arguments below [`SHIFT`] are moved upward with the recurrences
//! `psi(x) = psi(x + 1) - 1/x` and `ln G(x) = ln G(x + 1) - ln x`, then the
//! asymptotic (Bernoulli) series is evaluated. Above the shift point the
//! truncated series error is below 1e-13.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const SHIFT: f64 = 6.0;

fn check_domain(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires x > 0, got {x}")))
    }
}

/// The digamma function `psi(x) = d/dx ln Gamma(x)`.
pub fn digamma(x: f64) -> Result<f64> {
    check_domain("digamma", x)?;
    Ok(digamma_unchecked(x))
}

/// Trigamma `psi'(x)`, the derivative of [`digamma`].
pub fn trigamma(x: f64) -> Result<f64> {
    check_domain("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

/// `ln Gamma(x)`.
pub fn lgamma(x: f64) -> Result<f64> {
    check_domain("lgamma", x)?;
    Ok(lgamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < SHIFT {
        shift += 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2k / (2k x^2k), k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    x.ln() - 0.5 * inv - series - shift
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < SHIFT {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x^2) + sum_k B_2k / x^(2k+1)
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2
                                        * (5.0 / 66.0
                                            - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    inv + 0.5 * inv2 + series + shift
}

pub(crate) fn lgamma_unchecked(mut x: f64) -> f64 {
    let mut product = 1.0;
    while x < SHIFT {
        product *= x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2k / (2k (2k-1) x^(2k-1)), k = 1..7
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0
                                    - inv2
                                        * (1.0 / 1188.0
                                            - inv2 * (691.0 / 360360.0 - inv2 / 156.0))))));
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + series - product.ln()
}
