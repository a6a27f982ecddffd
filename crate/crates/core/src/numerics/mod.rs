//! Dense matrices, special functions and the softmax transforms.

mod matrix;
mod special;

pub use matrix::{argmax, Matrix};
pub use special::{digamma, lgamma, trigamma};
pub(crate) use special::{digamma_pos, ln_gamma_pos, trigamma_pos};

use crate::error::{Error, Result};

/// Logits are clamped to this range before exponentiation when computing
/// Dirichlet evidence; `e^709` already overflows an `f64`.
pub const LOGIT_CLAMP: f64 = 60.0;

/// Row-wise softmax, `e^{o_k} / Σ_j e^{o_j}`.
pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    calibrated_softmax(logits, 0.0)
}

/// Row-wise calibrated softmax, `(e^{o_k} + γ) / Σ_j (e^{o_j} + γ)`.
///
/// With `gamma == 0` this is bit-for-bit [`softmax`]. For `gamma > 0` the
/// result depends on the absolute logit scale, not only on differences.
pub fn calibrated_softmax(logits: &Matrix, gamma: f64) -> Result<Matrix> {
    check_gamma(gamma)?;
    logits.ensure_finite("logits")?;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    let mut scratch = vec![0.0; logits.cols()];
    for i in 0..logits.rows() {
        calibrated_row(logits.row(i), gamma, out.row_mut(i), &mut scratch);
    }
    Ok(out)
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "calibration constant must be finite and >= 0, got {gamma}"
        )))
    }
}

/// Writes the calibrated probabilities of one row into `probs` and the
/// pure-exponential shares `e^{o_k} / Σ_j (e^{o_j} + γ)` into `shares`.
///
/// Everything is scaled by `e^{-c}` with `c = max(max_k o_k, ln γ)` so no
/// term exceeds one.
pub(crate) fn calibrated_row(logits: &[f64], gamma: f64, probs: &mut [f64], shares: &mut [f64]) {
    let mut c = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ln_gamma = if gamma > 0.0 { gamma.ln() } else { f64::NEG_INFINITY };
    c = c.max(ln_gamma);
    let offset = if gamma > 0.0 { (ln_gamma - c).exp() } else { 0.0 };
    let mut total = 0.0;
    for (s, &o) in shares.iter_mut().zip(logits) {
        *s = (o - c).exp();
        total += *s + offset;
    }
    for ((p, s), _) in probs.iter_mut().zip(shares.iter_mut()).zip(logits) {
        *p = (*s + offset) / total;
        *s /= total;
    }
}
