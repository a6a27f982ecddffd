//! Source-free adaptation of a trained model to an unlabeled target set.
//!
//! The classifier head stays frozen. Every `relabel_interval` epochs the whole
//! target set is pseudolabelled from feature prototypes (and rectified when a
//! prior is given); each minibatch then minimises the evidential loss against
//! those labels plus the calibrated information-maximisation terms.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_total_with_components, LossComponents, LossWeights};
use crate::network::{Mlp, Sgd};
use crate::numerics::{calibrated_softmax, Matrix};
use crate::pseudolabel::{
    prototype_pseudolabels, rectify, PriorKnowledge, DEFAULT_PROTOTYPE_TEMPERATURE,
};

/// Rows per parallel forward chunk during a pseudolabel refresh.
const FORWARD_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub weights: LossWeights,
    /// Additive evidence constant of the Dirichlet concentrations.
    pub lambda: f64,
    /// Constraint used to rectify pseudolabels. `None` is the ES mode.
    #[serde(skip)]
    pub prior: Option<PriorKnowledge>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Kept at 0 by default so that zero loss weights leave the model untouched.
    pub weight_decay: f64,
    /// Epochs between pseudolabel refreshes.
    pub relabel_interval: usize,
    pub prototype_rounds: usize,
    pub prototype_temperature: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            weights: LossWeights::default(),
            lambda: 1.0,
            prior: None,
            epochs: 15,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            relabel_interval: 1,
            prototype_rounds: 2,
            prototype_temperature: DEFAULT_PROTOTYPE_TEMPERATURE,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if self.relabel_interval == 0 {
            return bad("relabel_interval must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.prototype_rounds == 0 {
            return bad("prototype_rounds must be >= 1".into());
        }
        if !(self.prototype_temperature > 0.0 && self.prototype_temperature.is_finite()) {
            return bad(format!(
                "prototype_temperature must be > 0, got {}",
                self.prototype_temperature
            ));
        }
        Ok(())
    }
}

/// One line of the adaptation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches.
    pub nll: f64,
    pub kl: f64,
    pub ent: f64,
    pub div: f64,
    pub total: f64,
    pub relabeled: bool,
    /// Labels changed by rectification at this epoch's refresh.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rectified_changes: Option<usize>,
    /// Only present when monitor labels were supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudolabel_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: Mlp,
    pub history: Vec<AdaptEpoch>,
    /// Pseudolabels from the last refresh.
    pub pseudolabels: Vec<usize>,
}

/// Forward pass over row chunks in parallel; rows are independent so the
/// result equals a single [`Mlp::forward`] call bit for bit.
pub fn forward_parallel(model: &Mlp, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let starts: Vec<usize> = (0..x.rows()).step_by(FORWARD_CHUNK).collect();
    let parts: Vec<(Matrix, Matrix)> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + FORWARD_CHUNK).min(x.rows())).collect();
            model.forward(&x.select_rows(&idx))
        })
        .collect::<Result<_>>()?;
    let dims = model.dims();
    let mut features = Vec::with_capacity(x.rows() * dims.bottleneck);
    let mut logits = Vec::with_capacity(x.rows() * dims.classes);
    for (f, l) in parts {
        features.extend_from_slice(f.data());
        logits.extend_from_slice(l.data());
    }
    Ok((
        Matrix::from_vec(x.rows(), dims.bottleneck, features)?,
        Matrix::from_vec(x.rows(), dims.classes, logits)?,
    ))
}

fn accuracy_of(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Pseudolabels for the whole target set under the current model.
/// Returns the labels and, when a prior is set, how many it changed.
pub fn refresh_pseudolabels(model: &Mlp, target_x: &Matrix, cfg: &AdaptConfig) -> Result<(Vec<usize>, Option<usize>)> {
    let (features, logits) = forward_parallel(model, target_x)?;
    let probs = calibrated_softmax(&logits, cfg.weights.gamma)?;
    let proto = prototype_pseudolabels(&features, &probs, cfg.prototype_rounds, cfg.prototype_temperature)?;
    match &cfg.prior {
        None => Ok((proto.set.labels, None)),
        Some(prior) => {
            let rectified = rectify(&proto.affinity, prior)?;
            let changed = rectified
                .labels
                .iter()
                .zip(&proto.set.labels)
                .filter(|(a, b)| a != b)
                .count();
            Ok((rectified.labels, Some(changed)))
        }
    }
}

/// Adapts a copy of `source` to `target_x`. `monitor_labels`, when given,
/// are used only to report accuracies in the history.
pub fn adapt(
    source: &Mlp,
    target_x: &Matrix,
    cfg: &AdaptConfig,
    monitor_labels: Option<&[usize]>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let n = target_x.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty target dataset".into()));
    }
    let classes = source.dims().classes;
    if target_x.cols() != source.dims().input {
        return Err(Error::shape(
            format!("{} target features", source.dims().input),
            target_x.cols().to_string(),
        ));
    }
    if let Some(prior) = &cfg.prior {
        if prior.classes() != classes {
            return Err(Error::InvalidArgument(format!(
                "prior has {} classes, model has {classes}",
                prior.classes()
            )));
        }
    }
    if let Some(y) = monitor_labels {
        if y.len() != n {
            return Err(Error::shape(format!("{n} monitor labels"), y.len().to_string()));
        }
    }

    let mut model = source.clone();
    model.head_frozen = true;
    let mut opt = Sgd::new(&model, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut pseudolabels = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let relabeled = epoch % cfg.relabel_interval == 0;
        let mut rectified_changes = None;
        if relabeled {
            let (labels, changes) = refresh_pseudolabels(&model, target_x, cfg)?;
            pseudolabels = labels;
            rectified_changes = changes;
        }
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        for chunk in order.chunks(cfg.batch_size) {
            let xb = target_x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| pseudolabels[i]).collect();
            let acts = model.forward_cached(&xb)?;
            let onehot = Matrix::one_hot(&yb, classes)?;
            let (loss, parts) = loss_total_with_components(&acts.logits, &onehot, &cfg.weights, cfg.lambda)?;
            let w = chunk.len() as f64;
            sums.nll += w * parts.nll;
            sums.kl += w * parts.kl;
            sums.ent += w * parts.ent;
            sums.div += w * parts.div;
            sums.total += w * parts.total;
            let mut grads = model.backward(&acts, &loss.grad_logits)?;
            for (i, g) in grads.iter_mut().enumerate() {
                if Mlp::is_head_param(i) {
                    g.data_mut().fill(0.0);
                }
            }
            opt.step(&mut model, &grads)?;
        }
        let nf = n as f64;
        let (pseudolabel_accuracy, accuracy) = match monitor_labels {
            Some(y) => (
                Some(accuracy_of(&pseudolabels, y)),
                Some(evaluate(&model, target_x, y)?.accuracy),
            ),
            None => (None, None),
        };
        history.push(AdaptEpoch {
            epoch,
            nll: sums.nll / nf,
            kl: sums.kl / nf,
            ent: sums.ent / nf,
            div: sums.div / nf,
            total: sums.total / nf,
            relabeled,
            rectified_changes,
            pseudolabel_accuracy,
            accuracy,
        });
    }
    Ok(AdaptOutcome {
        model,
        history,
        pseudolabels,
    })
}

/// Writes one JSON object per epoch.
pub fn write_history<W: Write>(history: &[AdaptEpoch], mut out: W) -> Result<()> {
    for h in history {
        serde_json::to_writer(&mut out, h)?;
        out.write_all(b"\n").map_err(|e| Error::io("<history>", e))?;
    }
    Ok(())
}

pub fn save_history(history: &[AdaptEpoch], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_history(history, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_history(path: impl AsRef<Path>) -> Result<Vec<AdaptEpoch>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Accuracy overall and per class. Predictions take the strongest evidence,
/// which is the lowest-indexed maximal logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the labels.
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
}

pub fn evaluate(model: &Mlp, x: &Matrix, labels: &[usize]) -> Result<Evaluation> {
    let (_, logits) = forward_parallel(model, x)?;
    evaluate_logits(&logits, labels)
}

pub fn evaluate_logits(logits: &Matrix, labels: &[usize]) -> Result<Evaluation> {
    let k = logits.cols();
    if labels.len() != logits.rows() {
        return Err(Error::shape(format!("{} labels", logits.rows()), labels.len().to_string()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
    }
    let pred = logits.argmax_rows();
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&p, &y) in pred.iter().zip(labels) {
        counts[y] += 1;
        hits[y] += usize::from(p == y);
    }
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        class_counts: counts,
    })
}
