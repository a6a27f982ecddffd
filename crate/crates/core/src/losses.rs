//! Evidential (Dirichlet) losses and calibrated information-maximization
//! losses, each returning its value together with `∂L/∂logits`.
//!
//! All batch reductions are arithmetic means over the rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    calibrated_row, check_gamma, digamma_pos, ln_gamma_pos, trigamma_pos, Matrix, LOGIT_CLAMP,
};

/// Floor applied before taking logarithms of probabilities.
const LN_FLOOR: f64 = f64::MIN_POSITIVE;

/// Dirichlet concentrations `α = e^o + λ` for a batch of logit rows.
#[derive(Debug, Clone)]
pub struct DirichletBatch {
    alpha: Matrix,
    /// `∂α/∂o`: `e^o` inside the clamp range, zero outside.
    dalpha: Matrix,
    lambda: f64,
}

impl DirichletBatch {
    pub fn alpha(&self) -> &Matrix {
        &self.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Dirichlet strength `S_i = Σ_k α_ik` per row.
    pub fn strength(&self) -> Vec<f64> {
        self.alpha.iter_rows().map(|r| r.iter().sum()).collect()
    }

    /// Expected class probabilities `α_ik / S_i`.
    pub fn probabilities(&self) -> Matrix {
        let mut p = self.alpha.clone();
        for i in 0..p.rows() {
            let row = p.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        p
    }

    fn chain(&self, grad_alpha: Matrix) -> Matrix {
        let mut g = grad_alpha;
        for (v, d) in g.data_mut().iter_mut().zip(self.dalpha.data()) {
            *v *= d;
        }
        g
    }
}

/// A scalar loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Matrix,
}

impl LossValue {
    fn zero(rows: usize, cols: usize) -> Self {
        LossValue {
            value: 0.0,
            grad_logits: Matrix::zeros(rows, cols),
        }
    }

    /// `self += s * other`, value and gradient alike.
    pub fn add_scaled(&mut self, s: f64, other: &LossValue) {
        self.value += s * other.value;
        self.grad_logits.axpy(s, &other.grad_logits);
    }
}

/// Weights of the combined objective
/// `w1·(L_nll + β·L_kl) + w2·(L̂_ent + L̂_div)`, plus the calibration
/// constant `γ` used by the information-maximization terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 0.3,
            w2: 1.0,
            beta: 0.5,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w1", self.w1),
            ("w2", self.w2),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of the combined objective (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub nll: f64,
    pub kl: f64,
    pub ent: f64,
    pub div: f64,
    pub total: f64,
}

/// `α_ik = e^{clamp(o_ik)} + λ`.
pub fn evidence_from_logits(logits: &Matrix, lambda: f64) -> Result<DirichletBatch> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "evidence offset must be finite and > 0, got {lambda}"
        )));
    }
    logits.ensure_finite("logits")?;
    let mut alpha = Matrix::zeros(logits.rows(), logits.cols());
    let mut dalpha = Matrix::zeros(logits.rows(), logits.cols());
    for ((a, d), &o) in alpha
        .data_mut()
        .iter_mut()
        .zip(dalpha.data_mut())
        .zip(logits.data())
    {
        let e = o.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp();
        *a = e + lambda;
        *d = if o.abs() <= LOGIT_CLAMP { e } else { 0.0 };
    }
    Ok(DirichletBatch {
        alpha,
        dalpha,
        lambda,
    })
}

/// Validates a one-hot label matrix and returns the class of each row.
pub fn one_hot_classes(labels: &Matrix) -> Result<Vec<usize>> {
    labels
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let mut class = None;
            for (k, &v) in row.iter().enumerate() {
                if v == 1.0 && class.is_none() {
                    class = Some(k);
                } else if v != 0.0 {
                    class = None;
                    break;
                }
            }
            class.ok_or_else(|| Error::InvalidArgument(format!("label row {i} is not one-hot")))
        })
        .collect()
}

fn check_labels(batch_shape: (usize, usize), labels: &Matrix) -> Result<Vec<usize>> {
    labels.ensure_shape(batch_shape.0, batch_shape.1)?;
    if batch_shape.0 == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    one_hot_classes(labels)
}

/// Negative log marginal likelihood,
/// `(1/N) Σ_i [ln S_i − ln α_{i,y_i}]`.
pub fn loss_nll(batch: &DirichletBatch, labels: &Matrix) -> Result<LossValue> {
    let alpha = &batch.alpha;
    let classes = check_labels(alpha.shape(), labels)?;
    let n = alpha.rows() as f64;
    let mut out = LossValue::zero(alpha.rows(), alpha.cols());
    let mut grad = Matrix::zeros(alpha.rows(), alpha.cols());
    for (i, &y) in classes.iter().enumerate() {
        let row = alpha.row(i);
        let s: f64 = row.iter().sum();
        out.value += s.ln() - row[y].ln();
        let g = grad.row_mut(i);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = 1.0 / s;
            if k == y {
                *gk -= 1.0 / row[y];
            }
            *gk /= n;
        }
    }
    out.value /= n;
    out.grad_logits = batch.chain(grad);
    Ok(out)
}

/// `KL(Dir(α̃) ‖ Dir(1))` averaged over `N·K`, where `α̃` replaces the
/// true-class concentration with 1 so only false-class evidence is penalized.
pub fn loss_kl(batch: &DirichletBatch, labels: &Matrix) -> Result<LossValue> {
    let alpha = &batch.alpha;
    let classes = check_labels(alpha.shape(), labels)?;
    let (rows, k) = alpha.shape();
    let scale = 1.0 / (rows as f64 * k as f64);
    let kf = k as f64;
    let ln_gamma_k = ln_gamma_pos(kf);
    let mut out = LossValue::zero(rows, k);
    let mut grad = Matrix::zeros(rows, k);
    let mut tilde = vec![0.0; k];
    for (i, &y) in classes.iter().enumerate() {
        tilde.copy_from_slice(alpha.row(i));
        tilde[y] = 1.0;
        let s: f64 = tilde.iter().sum();
        let psi_s = digamma_pos(s);
        let mut kl = ln_gamma_pos(s) - ln_gamma_k;
        for &a in &tilde {
            kl += (a - 1.0) * (digamma_pos(a) - psi_s) - ln_gamma_pos(a);
        }
        out.value += kl;

        let common = (s - kf) * trigamma_pos(s);
        let g = grad.row_mut(i);
        for (c, gc) in g.iter_mut().enumerate() {
            if c != y {
                *gc = scale * ((tilde[c] - 1.0) * trigamma_pos(tilde[c]) - common);
            }
        }
    }
    out.value *= scale;
    out.grad_logits = batch.chain(grad);
    Ok(out)
}

/// `L_nll + β·L_kl`.
pub fn loss_edl(batch: &DirichletBatch, labels: &Matrix, beta: f64) -> Result<LossValue> {
    let mut out = loss_nll(batch, labels)?;
    if beta != 0.0 {
        out.add_scaled(beta, &loss_kl(batch, labels)?);
    }
    Ok(out)
}

fn calibrated_rows(logits: &Matrix, gamma: f64) -> Result<(Matrix, Matrix)> {
    check_gamma(gamma)?;
    logits.ensure_finite("logits")?;
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut shares = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        calibrated_row(logits.row(i), gamma, probs.row_mut(i), shares.row_mut(i));
    }
    Ok((probs, shares))
}

/// Backpropagates `∂L/∂δ̂` through the calibrated softmax:
/// `∂L/∂o_j = q_j (g_j − Σ_k g_k δ̂_k)` with `q_j = e^{o_j} / Σ(e^o + γ)`.
fn calibrated_backward(probs: &Matrix, shares: &Matrix, upstream: &Matrix) -> Matrix {
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let (p, q, g) = (probs.row(i), shares.row(i), upstream.row(i));
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (j, out) in grad.row_mut(i).iter_mut().enumerate() {
            *out = q[j] * (g[j] - dot);
        }
    }
    grad
}

/// Mean per-sample entropy of the calibrated softmax.
pub fn loss_ent_calibrated(logits: &Matrix, gamma: f64) -> Result<LossValue> {
    let (probs, shares) = calibrated_rows(logits, gamma)?;
    let n = logits.rows() as f64;
    let mut value = 0.0;
    let mut upstream = Matrix::zeros(probs.rows(), probs.cols());
    for (p, g) in probs.data().iter().zip(upstream.data_mut()) {
        let lp = p.max(LN_FLOOR).ln();
        value -= p * lp;
        *g = -(lp + 1.0) / n;
    }
    Ok(LossValue {
        value: value / n,
        grad_logits: calibrated_backward(&probs, &shares, &upstream),
    })
}

/// `Σ_k p̄_k ln p̄_k` for the batch-mean calibrated prediction `p̄`.
/// Ranges over `[−ln K, 0]`; the minimum is reached by a uniform `p̄`.
pub fn loss_div_calibrated(logits: &Matrix, gamma: f64) -> Result<LossValue> {
    let (probs, shares) = calibrated_rows(logits, gamma)?;
    let n = logits.rows() as f64;
    let mean: Vec<f64> = probs.sum_rows().into_iter().map(|s| s / n).collect();
    let mut value = 0.0;
    let mut dmean = vec![0.0; mean.len()];
    for (m, d) in mean.iter().zip(dmean.iter_mut()) {
        let lm = m.max(LN_FLOOR).ln();
        value += m * lm;
        *d = (lm + 1.0) / n;
    }
    let mut upstream = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..upstream.rows() {
        upstream.row_mut(i).copy_from_slice(&dmean);
    }
    Ok(LossValue {
        value,
        grad_logits: calibrated_backward(&probs, &shares, &upstream),
    })
}

/// The combined adaptation objective.
pub fn loss_total(
    logits: &Matrix,
    labels: &Matrix,
    weights: &LossWeights,
    lambda: f64,
) -> Result<LossValue> {
    loss_total_with_components(logits, labels, weights, lambda).map(|(v, _)| v)
}

/// [`loss_total`] plus the unweighted value of every term.
pub fn loss_total_with_components(
    logits: &Matrix,
    labels: &Matrix,
    weights: &LossWeights,
    lambda: f64,
) -> Result<(LossValue, LossComponents)> {
    weights.validate()?;
    let batch = evidence_from_logits(logits, lambda)?;
    let nll = loss_nll(&batch, labels)?;
    let kl = loss_kl(&batch, labels)?;
    let ent = loss_ent_calibrated(logits, weights.gamma)?;
    let div = loss_div_calibrated(logits, weights.gamma)?;

    let mut total = LossValue::zero(logits.rows(), logits.cols());
    total.add_scaled(weights.w1, &nll);
    total.add_scaled(weights.w1 * weights.beta, &kl);
    total.add_scaled(weights.w2, &ent);
    total.add_scaled(weights.w2, &div);
    let components = LossComponents {
        nll: nll.value,
        kl: kl.value,
        ent: ent.value,
        div: div.value,
        total: total.value,
    };
    Ok((total, components))
}

#[cfg(test)]
#[allow(clippy::excessive_precision, clippy::type_complexity)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradTolerance};
    use crate::numerics::calibrated_softmax;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_batch(seed: u64, n: usize, k: usize) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        (
            Matrix::from_vec(n, k, logits).unwrap(),
            Matrix::one_hot(&labels, k).unwrap(),
        )
    }

    fn logits_for_alpha(alpha: &[f64], lambda: f64) -> Matrix {
        Matrix::from_rows(&[alpha.iter().map(|a| (a - lambda).ln()).collect::<Vec<_>>()]).unwrap()
    }

    #[test]
    fn evidence_examples() {
        let b = evidence_from_logits(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(b.alpha().row(0), &[2.0, 2.0]);
        assert_eq!(b.probabilities().row(0), &[0.5, 0.5]);

        let o = Matrix::from_rows(&[[1f64.ln(), 3f64.ln()]]).unwrap();
        let b = evidence_from_logits(&o, 1.0).unwrap();
        assert!((b.alpha()[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((b.alpha()[(0, 1)] - 4.0).abs() < 1e-14);
        assert!((b.probabilities()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!(evidence_from_logits(&o, 0.0).is_err());
        assert!(evidence_from_logits(&o, -1.0).is_err());
    }

    #[test]
    fn nll_examples() {
        let b = evidence_from_logits(&logits_for_alpha(&[2.0, 1.0, 1.0], 0.5), 0.5).unwrap();
        let y = Matrix::one_hot(&[0], 3).unwrap();
        let v = loss_nll(&b, &y).unwrap().value;
        assert!((v - (4f64.ln() - 2f64.ln())).abs() < 1e-12);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);

        let b = evidence_from_logits(&logits_for_alpha(&[1.0; 4], 0.5), 0.5).unwrap();
        for c in 0..4 {
            let v = loss_nll(&b, &Matrix::one_hot(&[c], 4).unwrap()).unwrap().value;
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let b = evidence_from_logits(&logits_for_alpha(&[1.0; 3], 0.5), 0.5).unwrap();
        let v = loss_kl(&b, &Matrix::one_hot(&[2], 3).unwrap()).unwrap().value;
        assert!(v.abs() < 1e-12);

        // α = (5, 3), true class 0 → α̃ = (1, 3); value from a 40-digit evaluation
        let b = evidence_from_logits(&logits_for_alpha(&[5.0, 3.0], 1.0), 1.0).unwrap();
        let v = loss_kl(&b, &Matrix::one_hot(&[0], 2).unwrap()).unwrap().value;
        assert!((v - 0.21597281100072151236).abs() < 1e-12, "{v}");
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // KL(Dir(1,3) ‖ Dir(1,1)) = E[ln p(x)] under Dir(1,3), i.e. Beta(1,3) on the first
        // coordinate: density 3(1−x)², sampled by inversion.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 400_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u: f64 = rng.random();
            let x = 1.0 - (1.0 - u).cbrt();
            acc += (3.0 * (1.0 - x) * (1.0 - x)).ln();
        }
        let mc = acc / n as f64;
        // loss averages over N·K = 2
        assert!((mc / 2.0 - 0.21597281100072151236).abs() < 5e-3, "{mc}");
    }

    #[test]
    fn edl_composition() {
        let (o, y) = random_batch(3, 6, 4);
        let b = evidence_from_logits(&o, 1.0).unwrap();
        let nll = loss_nll(&b, &y).unwrap();
        let kl = loss_kl(&b, &y).unwrap();
        assert_eq!(loss_edl(&b, &y, 0.0).unwrap(), nll);
        let half = loss_edl(&b, &y, 0.5).unwrap();
        assert!((half.value - (nll.value + 0.5 * kl.value)).abs() < 1e-12);
        let one = loss_edl(&b, &y, 1.0).unwrap().value;
        assert!((one - nll.value - kl.value).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_one_hot_labels() {
        let (o, _) = random_batch(1, 2, 3);
        let b = evidence_from_logits(&o, 1.0).unwrap();
        let soft = Matrix::from_rows(&[[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(loss_nll(&b, &soft).is_err());
        let double = Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(loss_kl(&b, &double).is_err());
        let empty = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(loss_nll(&b, &empty).is_err());
        assert!(loss_nll(&b, &Matrix::one_hot(&[0], 3).unwrap()).is_err());
    }

    #[test]
    fn information_maximization_examples() {
        for gamma in [0.0, 0.2, 1.0, 1.5] {
            let uniform = Matrix::from_rows(&[[0.3, 0.3], [-1.0, -1.0]]).unwrap();
            let v = loss_ent_calibrated(&uniform, gamma).unwrap().value;
            assert!((v - LN2).abs() < 1e-12);
            assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        }
        let sharp = Matrix::from_rows(&[[30.0, -30.0], [-30.0, 30.0]]).unwrap();
        assert!(loss_ent_calibrated(&sharp, 0.0).unwrap().value < 1e-20);
        // mean prediction uniform → minimum diversity loss
        assert!((loss_div_calibrated(&sharp, 0.0).unwrap().value + LN2).abs() < 1e-12);
        assert!((loss_div_calibrated(&sharp, 1.0).unwrap().value + LN2).abs() < 1e-12);
        let collapsed = Matrix::from_rows(&[[30.0, -30.0], [30.0, -30.0]]).unwrap();
        assert!(loss_div_calibrated(&collapsed, 0.0).unwrap().value.abs() < 1e-20);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let (o, y) = random_batch(5, 4, 3);
        let w = LossWeights {
            w1: 0.0,
            w2: 0.0,
            ..LossWeights::default()
        };
        let l = loss_total(&o, &y, &w, 1.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_logits.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_matches_hand_composition() {
        let (o, y) = random_batch(11, 8, 5);
        let w = LossWeights::default();
        assert_eq!((w.w1, w.w2, w.beta), (0.3, 1.0, 0.5));
        let b = evidence_from_logits(&o, 1.0).unwrap();
        let hand = 0.3 * (loss_nll(&b, &y).unwrap().value + 0.5 * loss_kl(&b, &y).unwrap().value)
            + 1.0
                * (loss_ent_calibrated(&o, w.gamma).unwrap().value
                    + loss_div_calibrated(&o, w.gamma).unwrap().value);
        let (total, parts) = loss_total_with_components(&o, &y, &w, 1.0).unwrap();
        assert!((total.value - hand).abs() < 1e-12);
        assert_eq!(parts.total, total.value);
        assert!(LossWeights { w1: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let tol = GradTolerance::LOSSES;
        for seed in 0..5 {
            let (o, y) = random_batch(seed, 8, 5);
            let lambda = 1.0;
            let gamma = [0.0, 0.2, 1.0, 1.5, 1.0][seed as usize];
            let nll = |m: &Matrix| loss_nll(&evidence_from_logits(m, lambda).unwrap(), &y).unwrap().value;
            let kl = |m: &Matrix| loss_kl(&evidence_from_logits(m, lambda).unwrap(), &y).unwrap().value;
            let edl = |m: &Matrix| {
                loss_edl(&evidence_from_logits(m, lambda).unwrap(), &y, 0.5).unwrap().value
            };
            let ent = |m: &Matrix| loss_ent_calibrated(m, gamma).unwrap().value;
            let div = |m: &Matrix| loss_div_calibrated(m, gamma).unwrap().value;
            let w = LossWeights {
                gamma,
                ..LossWeights::default()
            };
            let total = |m: &Matrix| loss_total(m, &y, &w, lambda).unwrap().value;

            let b = evidence_from_logits(&o, lambda).unwrap();
            let cases: [(&str, &dyn Fn(&Matrix) -> f64, Matrix); 6] = [
                ("nll", &nll, loss_nll(&b, &y).unwrap().grad_logits),
                ("kl", &kl, loss_kl(&b, &y).unwrap().grad_logits),
                ("edl", &edl, loss_edl(&b, &y, 0.5).unwrap().grad_logits),
                ("ent", &ent, loss_ent_calibrated(&o, gamma).unwrap().grad_logits),
                ("div", &div, loss_div_calibrated(&o, gamma).unwrap().grad_logits),
                ("total", &total, loss_total(&o, &y, &w, lambda).unwrap().grad_logits),
            ];
            for (name, f, g) in cases {
                let r = check_gradient(f, &o, &g, tol);
                assert!(r.passed(), "{name} seed {seed}: {r:?}");
            }
        }
    }

    fn batch_strategy() -> impl Strategy<Value = (Matrix, Vec<usize>)> {
        (1usize..6, 2usize..6).prop_flat_map(|(n, k)| {
            (
                proptest::collection::vec(-8.0f64..8.0, n * k),
                proptest::collection::vec(0..k, n),
            )
                .prop_map(move |(v, y)| (Matrix::from_vec(n, k, v).unwrap(), y))
        })
    }

    proptest! {
        #[test]
        fn evidence_probabilities_equal_calibrated_softmax(
            (o, _) in batch_strategy(), lambda in 0.05f64..3.0
        ) {
            let p = evidence_from_logits(&o, lambda).unwrap().probabilities();
            let q = calibrated_softmax(&o, lambda).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn loss_ranges((o, y) in batch_strategy(), gamma in 0.0f64..2.0) {
            let k = o.cols() as f64;
            let labels = Matrix::one_hot(&y, o.cols()).unwrap();
            let b = evidence_from_logits(&o, 1.0).unwrap();
            prop_assert!(b.alpha().data().iter().all(|&a| a >= 1.0));
            prop_assert!(loss_nll(&b, &labels).unwrap().value >= 0.0);
            prop_assert!(loss_kl(&b, &labels).unwrap().value >= -1e-12);
            let ent = loss_ent_calibrated(&o, gamma).unwrap().value;
            prop_assert!(ent >= -1e-12 && ent <= k.ln() + 1e-12);
            let div = loss_div_calibrated(&o, gamma).unwrap().value;
            prop_assert!(div >= -k.ln() - 1e-12 && div <= 1e-12);
        }
    }
}
