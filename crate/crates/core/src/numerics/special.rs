//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! All three shift the argument upward with the standard recurrences and then
//! evaluate an asymptotic series with Bernoulli-number coefficients.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LN_GAMMA_SHIFT: f64 = 10.0;
const DIGAMMA_SHIFT: f64 = 6.0;
const TRIGAMMA_SHIFT: f64 = 10.0;

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires a finite x > 0, got {x}")))
    }
}

/// `ln Γ(x)` for `x > 0`.
pub fn lgamma(x: f64) -> Result<f64> {
    check_positive("lgamma", x)?;
    Ok(ln_gamma_pos(x))
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(digamma_pos(x))
}

/// `ψ'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(trigamma_pos(x))
}

pub(crate) fn ln_gamma_pos(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    let mut z = x;
    let mut prod = 1.0;
    while z < LN_GAMMA_SHIFT {
        prod *= z;
        z += 1.0;
    }
    let r = 1.0 / z;
    let r2 = r * r;
    // B2/(2·1) ... B14/(14·13)
    let series = r
        * (1.0 / 12.0
            + r2 * (-1.0 / 360.0
                + r2 * (1.0 / 1260.0
                    + r2 * (-1.0 / 1680.0
                        + r2 * (1.0 / 1188.0 + r2 * (-691.0 / 360360.0 + r2 * (1.0 / 156.0)))))));
    let stirling = (z - 0.5) * z.ln() - z + 0.5 * (2.0 * PI).ln() + series;
    if prod == 1.0 {
        stirling
    } else {
        stirling - prod.ln()
    }
}

pub(crate) fn digamma_pos(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut acc = 0.0;
    while z < DIGAMMA_SHIFT {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let r2 = 1.0 / (z * z);
    let series = r2
        * (1.0 / 12.0
            + r2 * (-1.0 / 120.0
                + r2 * (1.0 / 252.0
                    + r2 * (-1.0 / 240.0 + r2 * (1.0 / 132.0 + r2 * (-691.0 / 32760.0))))));
    acc + z.ln() - 0.5 / z - series
}

pub(crate) fn trigamma_pos(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut acc = 0.0;
    while z < TRIGAMMA_SHIFT {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let r = 1.0 / z;
    let r2 = r * r;
    let series = r
        + 0.5 * r2
        + r * r2
            * (1.0 / 6.0
                + r2 * (-1.0 / 30.0
                    + r2 * (1.0 / 42.0
                        + r2 * (-1.0 / 30.0 + r2 * (5.0 / 66.0 + r2 * (-691.0 / 2730.0 + r2 * (7.0 / 6.0)))))));
    acc + series
}
