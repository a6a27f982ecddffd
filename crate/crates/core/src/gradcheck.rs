//! Central finite-difference gradient checking.

use serde::Serialize;

use crate::numerics::Matrix;

/// Tolerances for comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradTolerance {
    pub step: f64,
    pub relative: f64,
    /// Entries with `|analytic|` below this are compared absolutely against it.
    pub absolute: f64,
}

impl GradTolerance {
    pub const LOSSES: GradTolerance = GradTolerance {
        step: 1e-5,
        relative: 1e-5,
        absolute: 1e-8,
    };
    pub const NETWORK: GradTolerance = GradTolerance {
        step: 1e-5,
        relative: 1e-4,
        absolute: 1e-8,
    };
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub entries: usize,
    pub failures: usize,
    /// Largest relative error among entries compared relatively.
    pub max_relative_error: f64,
    /// Largest absolute error among near-zero entries.
    pub max_absolute_error: f64,
    pub worst_index: Option<usize>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Central difference `(f(x + h e_j) − f(x − h e_j)) / 2h` for every entry of `x`.
pub fn numeric_gradient(f: impl Fn(&Matrix) -> f64, x: &Matrix, step: f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for j in 0..x.data().len() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + step;
        let hi = f(&probe);
        probe.data_mut()[j] = orig - step;
        let lo = f(&probe);
        probe.data_mut()[j] = orig;
        out.data_mut()[j] = (hi - lo) / (2.0 * step);
    }
    out
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_gradient(
    f: impl Fn(&Matrix) -> f64,
    x: &Matrix,
    analytic: &Matrix,
    tol: GradTolerance,
) -> GradCheck {
    let numeric = numeric_gradient(f, x, tol.step);
    compare(analytic, &numeric, tol)
}

pub fn compare(analytic: &Matrix, numeric: &Matrix, tol: GradTolerance) -> GradCheck {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut report = GradCheck {
        entries: analytic.data().len(),
        failures: 0,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst_index: None,
    };
    let mut worst = 0.0;
    for (j, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let diff = (a - n).abs();
        let (ok, badness) = if a.abs() < tol.absolute {
            report.max_absolute_error = report.max_absolute_error.max(diff);
            (diff <= tol.absolute, diff / tol.absolute)
        } else {
            let rel = diff / a.abs();
            report.max_relative_error = report.max_relative_error.max(rel);
            (rel <= tol.relative, rel / tol.relative)
        };
        if !ok || !a.is_finite() {
            report.failures += 1;
        }
        if badness > worst || !a.is_finite() {
            worst = badness;
            report.worst_index = Some(j);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let f = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
        let analytic = x.map(|v| 2.0 * v);
        assert!(check_gradient(f, &x, &analytic, GradTolerance::LOSSES).passed());

        let mut wrong = analytic.clone();
        wrong.data_mut()[3] += 1e-3;
        let r = check_gradient(f, &x, &wrong, GradTolerance::LOSSES);
        assert_eq!(r.failures, 1);
        assert_eq!(r.worst_index, Some(3));
    }
}
