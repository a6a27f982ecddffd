//! Slow reference implementations used to cross-check the fast paths.
//! They share no code with the code they check beyond the constraint
//! predicate and the objective.

use crate::numerics::Matrix;
use crate::pseudolabel::{check_constraints, log_likelihood, PriorKnowledge};

/// Exhaustive search over all `K^N` labelings for the constrained
/// maximum-likelihood assignment. Returns `None` if nothing is feasible.
pub fn brute_force_rectify(probs: &Matrix, prior: &PriorKnowledge) -> Option<(Vec<usize>, f64)> {
    let (n, k) = probs.shape();
    assert!(n <= 12 && k.pow(n as u32) <= 1 << 20, "instance too large for brute force");
    let mut labels = vec![0usize; n];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        if check_constraints(&labels, prior).is_ok() {
            let ll = log_likelihood(probs, &labels);
            if best.as_ref().is_none_or(|b| ll > b.1) {
                best = Some((labels.clone(), ll));
            }
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}

/// ECE by scanning every bin over every sample, with per-bin sums kept apart
/// from the fast single-pass version.
pub fn brute_force_ece(probs: &Matrix, labels: &[usize], m: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for j in 0..m {
        let lo = j as f64 / m as f64;
        let hi = (j + 1) as f64 / m as f64;
        let mut members = Vec::new();
        for (i, &y) in labels.iter().enumerate() {
            let row = probs.row(i);
            let c = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let inside = (c > lo || (j == 0 && c <= lo)) && (c <= hi || j == m - 1);
            if inside {
                members.push((c, row[y] == c));
            }
        }
        if members.is_empty() {
            continue;
        }
        let size = members.len() as f64;
        let confidence = members.iter().map(|m| m.0).sum::<f64>() / size;
        let accuracy = members.iter().filter(|m| m.1).count() as f64 / size;
        total += size / n as f64 * (accuracy - confidence).abs();
    }
    total
}

/// Textbook max-shifted softmax of one row.
pub fn reference_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&o| (o - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `(x, ln Γ(x), ψ(x))` evaluated with mpmath at 40 significant digits.
#[allow(clippy::excessive_precision, clippy::approx_constant)]
pub const SPECIAL_FUNCTION_REFERENCE: [(f64, f64, f64); 20] = [
    (0.001, 6.907178885383853682512, -1000.575571931810300471),
    (0.01, 4.599479878042021722514, -100.5608854578686744975),
    (0.1, 2.25271265173420595987, -10.42375494041107679517),
    (0.25, 1.288022524698077457371, -4.22745353337626540809),
    (0.5, 0.5723649429247000870717, -1.963510026021423479441),
    (0.75, 0.2032809514312953714814, -1.085860879786472169627),
    (1.0, 0.0, -0.5772156649015328606065),
    (1.5, -0.1207822376352452223455, 0.03648997397857652055902),
    (2.0, 0.0, 0.4227843350984671393935),
    (2.5, 0.2846828704729191596325, 0.7031566406452431872257),
    (3.0, 0.6931471805599453094172, 0.9227843350984671393935),
    (3.7, 1.428072326665387921872, 1.167153539361511385874),
    (5.0, 3.178053830347945619647, 1.506117668431800472727),
    (7.25, 7.052185450738539444926, 1.910453526883736028382),
    (10.0, 12.80182748008146961121, 2.251752589066721107647),
    (20.0, 39.33988418719949403622, 2.970523992242149050877),
    (50.0, 144.5657439463448860089, 3.901989673427892196954),
    (100.0, 359.134205369575398776, 4.600161852738087400199),
    (1000.0, 5905.220423209181211826, 6.90725519564881205205),
    (10000.0, 82099.71749644237727265, 9.210290371142849403572),
];
