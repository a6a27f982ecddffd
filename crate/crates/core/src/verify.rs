//! Fixed-seed self checks run by `evcal verify`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calibration::ece;
use crate::error::Result;
use crate::gradcheck::{check_gradient, GradTolerance};
use crate::losses::{
    evidence_from_logits, loss_div_calibrated, loss_edl, loss_ent_calibrated, loss_kl, loss_nll, loss_total,
    LossWeights,
};
use crate::network::{Mlp, MlpDims, PARAM_NAMES};
use crate::numerics::{calibrated_softmax, digamma, lgamma, Matrix};
use crate::oracle::{brute_force_ece, brute_force_rectify, reference_softmax, SPECIAL_FUNCTION_REFERENCE};
use crate::pseudolabel::{check_constraints, rectify, PriorKnowledge};

/// Names of the loss terms whose gradients are checked.
pub const LOSS_TERMS: [&str; 6] = ["nll", "kl", "edl", "ent", "div", "total"];

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub checks: Vec<CheckOutcome>,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Test fixture: corrupt the analytic gradient of this term (a loss term
    /// name or `network.<param>`), which must then be reported as failing.
    pub perturb_gradient: Option<String>,
}

fn timed(name: impl Into<String>, f: impl FnOnce() -> (bool, String)) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> Matrix {
    Matrix::from_vec(n, k, (0..n * k).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Matrix {
    let mut p = Matrix::zeros(n, k);
    for i in 0..n {
        let row = p.row_mut(i);
        row.iter_mut().for_each(|v| *v = rng.random::<f64>() + 1e-3);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

fn random_priors(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn perturb(g: &mut Matrix, name: &str, opts: &VerifyOptions) {
    if opts.perturb_gradient.as_deref() == Some(name) {
        g.data_mut()[0] += 1e-3;
    }
}

/// Finite-difference checks of every loss term and every network tensor,
/// over five seeds each.
pub fn gradient_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let lambda = 1.0;
    for term in LOSS_TERMS {
        out.push(timed(format!("gradient {term}"), || {
            let mut worst = 0.0f64;
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let o = random_logits(&mut rng, 8, 5, 3.0);
                let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
                let y = Matrix::one_hot(&labels, 5).expect("labels in range");
                let w = LossWeights {
                    gamma: [0.0, 0.2, 1.0, 1.5, 1.0][seed as usize],
                    ..LossWeights::default()
                };
                let value = |m: &Matrix| -> Result<crate::losses::LossValue> {
                    let b = evidence_from_logits(m, lambda)?;
                    match term {
                        "nll" => loss_nll(&b, &y),
                        "kl" => loss_kl(&b, &y),
                        "edl" => loss_edl(&b, &y, w.beta),
                        "ent" => loss_ent_calibrated(m, w.gamma),
                        "div" => loss_div_calibrated(m, w.gamma),
                        _ => loss_total(m, &y, &w, lambda),
                    }
                };
                let mut g = match value(&o) {
                    Ok(v) => v.grad_logits,
                    Err(e) => return (false, e.to_string()),
                };
                perturb(&mut g, term, opts);
                let r = check_gradient(|m| value(m).map_or(f64::NAN, |v| v.value), &o, &g, GradTolerance::LOSSES);
                worst = worst.max(r.max_relative_error);
                if !r.passed() {
                    return (
                        false,
                        format!("{term}: seed {seed}, {} of {} entries off (worst index {:?})", r.failures, r.entries, r.worst_index),
                    );
                }
            }
            (true, format!("max relative error {worst:.2e}"))
        }));
    }
    for (i, pname) in PARAM_NAMES.iter().enumerate() {
        let name = format!("network.{pname}");
        out.push(timed(format!("gradient {name}"), || {
            let mut worst = 0.0f64;
            for seed in 0..5u64 {
                let dims = MlpDims {
                    input: 4,
                    hidden: 6,
                    bottleneck: 5,
                    classes: 3,
                };
                let model = Mlp::new(dims, seed).expect("valid dims");
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let x = random_logits(&mut rng, 7, 4, 1.5);
                let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..3)).collect();
                let y = Matrix::one_hot(&labels, 3).expect("labels in range");
                let w = LossWeights::default();
                let loss_at = |m: &Mlp| -> f64 {
                    m.forward(&x)
                        .and_then(|(_, l)| loss_total(&l, &y, &w, 1.0))
                        .map_or(f64::NAN, |v| v.value)
                };
                let grads = model
                    .forward_cached(&x)
                    .and_then(|acts| loss_total(&acts.logits, &y, &w, 1.0).and_then(|l| model.backward(&acts, &l.grad_logits)));
                let mut g = match grads {
                    Ok(g) => g[i].clone(),
                    Err(e) => return (false, e.to_string()),
                };
                perturb(&mut g, &name, opts);
                let f = |p: &Matrix| {
                    let mut m = model.clone();
                    m.set_param(i, p.clone()).map_or(f64::NAN, |_| loss_at(&m))
                };
                let r = check_gradient(f, &model.params()[i], &g, GradTolerance::NETWORK);
                worst = worst.max(r.max_relative_error);
                if !r.passed() {
                    return (
                        false,
                        format!("{name}: seed {seed}, {} of {} entries off (worst index {:?})", r.failures, r.entries, r.worst_index),
                    );
                }
            }
            (true, format!("max relative error {worst:.2e}"))
        }));
    }
    out
}

pub fn special_function_check() -> CheckOutcome {
    timed("special functions", || {
        let mut worst = 0.0f64;
        for &(x, lg, dg) in &SPECIAL_FUNCTION_REFERENCE {
            let (Ok(a), Ok(b)) = (lgamma(x), digamma(x)) else {
                return (false, format!("domain error at {x}"));
            };
            let err = (a - lg).abs().max((b - dg).abs());
            worst = worst.max(err);
            if err > 1e-10 {
                return (false, format!("x = {x}: lgamma {a} vs {lg}, digamma {b} vs {dg}"));
            }
        }
        (true, format!("20 points, max abs error {worst:.2e}"))
    })
}

pub fn softmax_checks() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows: Vec<Matrix> = (0..100)
        .map(|_| {
            let k = rng.random_range(2..7);
            loop {
                let r = random_logits(&mut rng, 1, k, 8.0);
                let (lo, hi) = r.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                if hi - lo > 1e-3 {
                    return r;
                }
            }
        })
        .collect();
    vec![
        timed("calibrated softmax gamma=0 equals softmax", || {
            for r in &rows {
                let p = calibrated_softmax(r, 0.0).expect("finite");
                let q = reference_softmax(r.data());
                if p.data().iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-12) {
                    return (false, format!("row {:?}", r.data()));
                }
            }
            (true, "100 rows".into())
        }),
        timed("calibrated softmax breaks translation invariance", || {
            for r in &rows {
                let p = calibrated_softmax(r, 1.0).expect("finite");
                let q = calibrated_softmax(&r.map(|v| v + 1.0), 1.0).expect("finite");
                if p == q {
                    return (false, format!("invariant row {:?}", r.data()));
                }
            }
            (true, "100 rows".into())
        }),
        timed("evidence probabilities equal calibrated softmax", || {
            for (i, r) in rows.iter().enumerate() {
                let lambda = [0.2, 1.0, 1.5][i % 3];
                let p = evidence_from_logits(r, lambda).expect("finite").probabilities();
                let q = calibrated_softmax(r, lambda).expect("finite");
                if p.data().iter().zip(q.data()).any(|(a, b)| (a - b).abs() > 1e-12) {
                    return (false, format!("row {:?}, lambda {lambda}", r.data()));
                }
            }
            (true, "100 rows".into())
        }),
    ]
}

pub fn rectification_checks() -> Vec<CheckOutcome> {
    vec![
        timed("UB flow equals brute force", || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for t in 0..200 {
                let n = rng.random_range(1..=10);
                let k = rng.random_range(2..=3);
                let p = random_probs(&mut rng, n, k);
                let sigma = [0.0, 0.1, 0.3, 0.5, 1.0][rng.random_range(0..5)];
                let prior = PriorKnowledge::unary_bound(random_priors(&mut rng, k), sigma).expect("valid prior");
                match (rectify(&p, &prior), brute_force_rectify(&p, &prior)) {
                    (Ok(out), Some((_, best))) if (out.log_likelihood - best).abs() <= 1e-9 => {}
                    (Ok(out), Some((_, best))) => return (false, format!("instance {t}: {} vs {best}", out.log_likelihood)),
                    (r, b) => return (false, format!("instance {t}: solver {:?}, brute force {:?}", r.is_ok(), b.is_some())),
                }
            }
            (true, "200 instances, N <= 10, K <= 3".into())
        }),
        timed("BR repair equals brute force", || {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for t in 0..300 {
                let n = rng.random_range(1..=8);
                let k = rng.random_range(2..=4);
                let p = random_probs(&mut rng, n, k);
                let prior = PriorKnowledge::binary_relationship(random_priors(&mut rng, k)).expect("valid prior");
                let best = brute_force_rectify(&p, &prior).expect("order is always satisfiable").1;
                match rectify(&p, &prior) {
                    Ok(out) if (out.log_likelihood - best).abs() <= 1e-9 => {}
                    Ok(out) => return (false, format!("instance {t}: {} vs {best}", out.log_likelihood)),
                    Err(e) => return (false, format!("instance {t}: {e}")),
                }
            }
            (true, "300 instances, N <= 8, K <= 4".into())
        }),
        timed("rectified labels satisfy fuzzed priors", || {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            for t in 0..1000 {
                let n = rng.random_range(1..=60);
                let k = rng.random_range(2..=5);
                let p = random_probs(&mut rng, n, k);
                let priors = random_priors(&mut rng, k);
                let prior = if rng.random::<bool>() {
                    let sigma = [0.0, 0.05, 0.2, 0.5, 1.0, 2.0, f64::INFINITY][rng.random_range(0..7)];
                    PriorKnowledge::unary_bound(priors, sigma)
                } else {
                    PriorKnowledge::binary_relationship(priors)
                }
                .expect("valid prior");
                match rectify(&p, &prior) {
                    Ok(out) => {
                        if let Err(v) = check_constraints(&out.labels, &prior) {
                            return (false, format!("instance {t}: {}", v[0]));
                        }
                    }
                    Err(e) => return (false, format!("instance {t}: {e}")),
                }
            }
            (true, "1000 instances".into())
        }),
    ]
}

pub fn ece_checks() -> Vec<CheckOutcome> {
    vec![
        timed("ECE hand cases", || {
            let p = Matrix::from_rows(&[[0.9, 0.1], [0.8, 0.2], [0.7, 0.3], [0.6, 0.4]]).expect("rows");
            let a = ece(&p, &[0, 0, 1, 0], 1).map(|r| r.ece);
            let b = ece(&p, &[0, 1, 1, 0], 1).map(|r| r.ece);
            match (a, b) {
                (Ok(a), Ok(b)) if a == 0.0 && b == 0.25 => (true, "0 and 0.25".into()),
                (a, b) => (false, format!("got {a:?} and {b:?}")),
            }
        }),
        timed("ECE equals oracle", || {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            for t in 0..1000 {
                let n = rng.random_range(1..80);
                let k = rng.random_range(2..6);
                let p = calibrated_softmax(&random_logits(&mut rng, n, k, 4.0), 0.0).expect("finite");
                let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                let m = rng.random_range(1..=20);
                match ece(&p, &y, m) {
                    Ok(r) if (r.ece - brute_force_ece(&p, &y, m)).abs() <= 1e-12 => {}
                    Ok(r) => return (false, format!("instance {t}: {} vs {}", r.ece, brute_force_ece(&p, &y, m))),
                    Err(e) => return (false, format!("instance {t}: {e}")),
                }
            }
            (true, "1000 instances".into())
        }),
    ]
}

/// Every check, in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> VerifySummary {
    let mut checks = gradient_checks(opts);
    checks.push(special_function_check());
    checks.extend(softmax_checks());
    checks.extend(rectification_checks());
    checks.extend(ece_checks());
    VerifySummary { checks }
}
