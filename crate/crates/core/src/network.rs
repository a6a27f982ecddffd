//! A small feed-forward classifier `d_in → hidden (ReLU) → bottleneck → K`
//! with hand-written backpropagation, label-smoothing cross-entropy and
//! momentum SGD.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossValue;
use crate::numerics::{softmax, Matrix};

/// Layer sizes of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub classes: usize,
}

impl MlpDims {
    pub fn new(input: usize, classes: usize) -> Self {
        MlpDims {
            input,
            hidden: 32,
            bottleneck: 16,
            classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.bottleneck == 0 || self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "invalid network dims {self:?}: all sizes must be positive and classes >= 2"
            )));
        }
        Ok(())
    }

    fn param_shapes(&self) -> [(usize, usize); PARAM_COUNT] {
        [
            (self.input, self.hidden),
            (1, self.hidden),
            (self.hidden, self.bottleneck),
            (1, self.bottleneck),
            (self.bottleneck, self.classes),
            (1, self.classes),
        ]
    }
}

const PARAM_COUNT: usize = 6;
/// Parameter tensors `[0, HEAD_START)` form the feature extractor; the rest
/// belong to the classifier head.
const HEAD_START: usize = 4;

pub const PARAM_NAMES: [&str; PARAM_COUNT] = [
    "hidden.weight",
    "hidden.bias",
    "bottleneck.weight",
    "bottleneck.bias",
    "head.weight",
    "head.bias",
];

/// Parameter gradients, laid out like [`Mlp::params`].
pub type Gradients = Vec<Matrix>;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: MlpDims,
    seed: u64,
    params: Vec<Matrix>,
    /// When set, optimizer steps leave the classifier head untouched.
    pub head_frozen: bool,
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Activations {
    input: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    pub features: Matrix,
    pub logits: Matrix,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(dims: MlpDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = dims
            .param_shapes()
            .iter()
            .map(|&(r, c)| {
                if r == 1 {
                    return Matrix::zeros(r, c);
                }
                let bound = (6.0 / (r + c) as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                Matrix::from_vec(r, c, data).expect("shape")
            })
            .collect();
        Ok(Mlp {
            dims,
            seed,
            params,
            head_frozen: false,
        })
    }

    /// A model with every parameter zero.
    pub fn zeros(dims: MlpDims) -> Result<Self> {
        dims.validate()?;
        Ok(Mlp {
            dims,
            seed: 0,
            params: dims
                .param_shapes()
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect(),
            head_frozen: false,
        })
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn head_params(&self) -> &[Matrix] {
        &self.params[HEAD_START..]
    }

    pub fn is_head_param(index: usize) -> bool {
        index >= HEAD_START
    }

    /// Replaces one parameter tensor, checking its shape.
    pub fn set_param(&mut self, index: usize, value: Matrix) -> Result<()> {
        let (r, c) = self.dims.param_shapes()[index];
        value.ensure_shape(r, c)?;
        value.ensure_finite(PARAM_NAMES[index])?;
        self.params[index] = value;
        Ok(())
    }

    /// Returns `(features, logits)`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let a = self.forward_cached(x)?;
        Ok((a.features, a.logits))
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<Activations> {
        if x.cols() != self.dims.input {
            return Err(Error::shape(
                format!("{} input columns", self.dims.input),
                format!("{} columns", x.cols()),
            ));
        }
        let p = &self.params;
        let mut hidden_pre = x.matmul(&p[0])?;
        hidden_pre.add_row_vector(p[1].data());
        let hidden = hidden_pre.map(|v| v.max(0.0));
        let mut features = hidden.matmul(&p[2])?;
        features.add_row_vector(p[3].data());
        let mut logits = features.matmul(&p[4])?;
        logits.add_row_vector(p[5].data());
        Ok(Activations {
            input: x.clone(),
            hidden_pre,
            hidden,
            features,
            logits,
        })
    }

    /// Backpropagates `∂L/∂logits` to every parameter.
    pub fn backward(&self, acts: &Activations, grad_logits: &Matrix) -> Result<Gradients> {
        grad_logits.ensure_shape(acts.logits.rows(), acts.logits.cols())?;
        let p = &self.params;
        let d_head_w = acts.features.t_matmul(grad_logits)?;
        let d_head_b = bias_grad(grad_logits);
        let d_features = grad_logits.matmul_t(&p[4])?;
        let d_bottle_w = acts.hidden.t_matmul(&d_features)?;
        let d_bottle_b = bias_grad(&d_features);
        let mut d_hidden = d_features.matmul_t(&p[2])?;
        for (g, &z) in d_hidden.data_mut().iter_mut().zip(acts.hidden_pre.data()) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let d_hidden_w = acts.input.t_matmul(&d_hidden)?;
        let d_hidden_b = bias_grad(&d_hidden);
        Ok(vec![
            d_hidden_w, d_hidden_b, d_bottle_w, d_bottle_b, d_head_w, d_head_b,
        ])
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.1.argmax_rows())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&Checkpoint::from(self))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.into_model()
    }
}

fn bias_grad(g: &Matrix) -> Matrix {
    let s = g.sum_rows();
    Matrix::from_vec(1, s.len(), s).expect("shape")
}

pub const CHECKPOINT_FORMAT: &str = "evcal-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint layout. See `docs/formats.md`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    dims: MlpDims,
    seed: u64,
    head_frozen: bool,
    params: Vec<NamedParam>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Mlp> for Checkpoint {
    fn from(m: &Mlp) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: m.dims,
            seed: m.seed,
            head_frozen: m.head_frozen,
            params: m
                .params
                .iter()
                .zip(PARAM_NAMES)
                .map(|(p, name)| NamedParam {
                    name: name.into(),
                    rows: p.rows(),
                    cols: p.cols(),
                    data: p.data().to_vec(),
                })
                .collect(),
        }
    }
}

impl Checkpoint {
    fn into_model(self) -> Result<Mlp> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = Mlp::zeros(self.dims)?;
        model.seed = self.seed;
        model.head_frozen = self.head_frozen;
        if self.params.len() != PARAM_COUNT {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter tensors, expected {PARAM_COUNT}",
                self.params.len()
            )));
        }
        for (i, p) in self.params.into_iter().enumerate() {
            if p.name != PARAM_NAMES[i] {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter {i} is {:?}, expected {:?}",
                    p.name, PARAM_NAMES[i]
                )));
            }
            model.set_param(i, Matrix::from_vec(p.rows, p.cols, p.data)?)?;
        }
        Ok(model)
    }
}

/// Mini-batch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Momentum SGD with decoupled velocity buffers:
/// `v ← m·v + g`, `θ ← θ − lr·(v + wd·θ)`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(model: &Mlp, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: model
                .params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn from_config(model: &Mlp, cfg: &SgdConfig) -> Self {
        Sgd::new(model, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &[Matrix]) -> Result<()> {
        if grads.len() != PARAM_COUNT {
            return Err(Error::shape(
                format!("{PARAM_COUNT} gradient tensors"),
                grads.len().to_string(),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            let p = &model.params[i];
            g.ensure_shape(p.rows(), p.cols())?;
        }
        for (i, g) in grads.iter().enumerate() {
            if model.head_frozen && Mlp::is_head_param(i) {
                continue;
            }
            let v = &mut self.velocity[i];
            let theta = &mut model.params[i];
            for ((t, vel), &gr) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + gr;
                *t -= self.learning_rate * (*vel + self.weight_decay * *t);
            }
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters after SGD step"));
        }
        Ok(())
    }
}

/// Cross-entropy against smoothed targets `(1−s)·onehot + s/K`.
pub fn smoothed_cross_entropy(logits: &Matrix, labels: &[usize], smoothing: f64) -> Result<LossValue> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing must lie in [0, 1), got {smoothing}"
        )));
    }
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(Error::shape(
            format!("{} labels", logits.rows()),
            labels.len().to_string(),
        ));
    }
    let k = logits.cols();
    let probs = softmax(logits)?;
    let n = logits.rows() as f64;
    let off = smoothing / k as f64;
    let on = 1.0 - smoothing + off;
    let mut value = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|o| (o - m).exp()).sum::<f64>().ln();
        for (c, &o) in row.iter().enumerate() {
            let t = if c == y { on } else { off };
            value -= t * (o - lse);
            grad[(i, c)] = (grad[(i, c)] - t) / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        grad_logits: grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains `model` on labeled source data and returns the per-epoch history.
pub fn train_source(
    model: &mut Mlp,
    x: &Matrix,
    labels: &[usize],
    smoothing: f64,
    cfg: &SgdConfig,
) -> Result<Vec<SourceEpoch>> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty source dataset".into()));
    }
    if labels.len() != x.rows() {
        return Err(Error::shape(format!("{} labels", x.rows()), labels.len().to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.dims.classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            model.dims.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::from_config(model, cfg);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let acts = model.forward_cached(&xb)?;
            let loss = smoothed_cross_entropy(&acts.logits, &yb, smoothing)?;
            loss_sum += loss.value * chunk.len() as f64;
            correct += acts
                .logits
                .argmax_rows()
                .iter()
                .zip(&yb)
                .filter(|(p, y)| p == y)
                .count();
            let grads = model.backward(&acts, &loss.grad_logits)?;
            opt.step(model, &grads)?;
        }
        history.push(SourceEpoch {
            epoch,
            loss: loss_sum / x.rows() as f64,
            accuracy: correct as f64 / x.rows() as f64,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradTolerance};
    use crate::losses::{loss_total, LossWeights};
    use rand_distr::{Distribution, Normal};

    fn random_input(seed: u64, n: usize, d: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn blobs(seed: u64, per_class: usize) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in [[-2.0, 0.0], [2.0, 0.0]].iter().enumerate() {
            for _ in 0..per_class {
                rows.push(vec![centre[0] + noise.sample(&mut rng), centre[1] + noise.sample(&mut rng)]);
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn zero_model_gives_uniform_prediction() {
        let m = Mlp::zeros(MlpDims::new(3, 4)).unwrap();
        let (_, logits) = m.forward(&random_input(0, 5, 3)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = softmax(&logits).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn degenerate_config_is_linear() {
        // identity hidden/bottleneck layers on non-negative inputs leave a linear map
        let dims = MlpDims {
            input: 2,
            hidden: 2,
            bottleneck: 2,
            classes: 2,
        };
        let mut m = Mlp::zeros(dims).unwrap();
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        m.set_param(0, eye.clone()).unwrap();
        m.set_param(2, eye).unwrap();
        let head = Matrix::from_rows(&[[2.0, -1.0], [0.5, 3.0]]).unwrap();
        m.set_param(4, head.clone()).unwrap();
        m.set_param(5, Matrix::from_rows(&[[0.1, -0.2]]).unwrap()).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [0.0, 0.5]]).unwrap();
        let (features, logits) = m.forward(&x).unwrap();
        assert_eq!(features, x);
        let mut expect = x.matmul(&head).unwrap();
        expect.add_row_vector(&[0.1, -0.2]);
        assert_eq!(logits, expect);
        assert!(m.forward(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let x = random_input(1, 10, 4);
        let a = Mlp::new(MlpDims::new(4, 3), 42).unwrap();
        let b = Mlp::new(MlpDims::new(4, 3), 42).unwrap();
        let (fa, la) = a.forward(&x).unwrap();
        let (fb, lb) = b.forward(&x).unwrap();
        assert_eq!(fa.data(), fb.data());
        assert_eq!(la.data(), lb.data());
        assert_ne!(a, Mlp::new(MlpDims::new(4, 3), 43).unwrap());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..5 {
            let dims = MlpDims {
                input: 4,
                hidden: 6,
                bottleneck: 5,
                classes: 3,
            };
            let model = Mlp::new(dims, seed).unwrap();
            let x = random_input(100 + seed, 7, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..3)).collect();
            let y = Matrix::one_hot(&labels, 3).unwrap();
            let w = LossWeights::default();
            let acts = model.forward_cached(&x).unwrap();
            let loss = loss_total(&acts.logits, &y, &w, 1.0).unwrap();
            let grads = model.backward(&acts, &loss.grad_logits).unwrap();
            for (i, g) in grads.iter().enumerate() {
                let f = |p: &Matrix| {
                    let mut m = model.clone();
                    m.set_param(i, p.clone()).unwrap();
                    loss_total(&m.forward(&x).unwrap().1, &y, &w, 1.0).unwrap().value
                };
                let r = check_gradient(f, &model.params()[i], g, GradTolerance::NETWORK);
                assert!(r.passed(), "{} seed {seed}: {r:?}", PARAM_NAMES[i]);
            }
        }
    }

    #[test]
    fn smoothing_zero_is_plain_cross_entropy() {
        let logits = random_input(3, 6, 4);
        let labels = [0, 1, 2, 3, 0, 1];
        let ce = smoothed_cross_entropy(&logits, &labels, 0.0).unwrap();
        let p = softmax(&logits).unwrap();
        let plain = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| p[(i, y)].ln())
            .sum::<f64>()
            / 6.0;
        assert!((ce.value - plain).abs() < 1e-12);
        assert!(smoothed_cross_entropy(&logits, &labels, 1.0).is_err());
        assert!(smoothed_cross_entropy(&logits, &[0, 1, 2, 4, 0, 1], 0.0).is_err());
    }

    #[test]
    fn smoothed_loss_has_positive_floor() {
        let (k, s) = (4usize, 0.1);
        let mut logits = Matrix::filled(1, k, -30.0);
        logits[(0, 2)] = 30.0;
        let v = smoothed_cross_entropy(&logits, &[2], s).unwrap().value;
        // with ±30 logits the off-target log-probabilities are ≈ −60
        let kf = k as f64;
        assert!((v - 60.0 * s * (kf - 1.0) / kf).abs() < 1e-9);
        // the infimum over logits is the entropy of the smoothed target
        let on = 1.0 - s + s / kf;
        let off = s / kf;
        let floor = -(on * on.ln() + (kf - 1.0) * off * off.ln());
        assert!(floor > 0.0 && v > floor);
        let mut best = Matrix::filled(1, k, off.ln());
        best[(0, 2)] = on.ln();
        let at_floor = smoothed_cross_entropy(&best, &[2], s).unwrap().value;
        assert!((at_floor - floor).abs() < 1e-12);
    }

    #[test]
    fn smoothed_gradient_matches_finite_differences() {
        let logits = random_input(9, 5, 3);
        let labels = [0, 2, 1, 1, 0];
        let g = smoothed_cross_entropy(&logits, &labels, 0.1).unwrap().grad_logits;
        let f = |m: &Matrix| smoothed_cross_entropy(m, &labels, 0.1).unwrap().value;
        assert!(check_gradient(f, &logits, &g, GradTolerance::LOSSES).passed());
    }

    #[test]
    fn sgd_step_rules() {
        let dims = MlpDims::new(2, 2);
        let base = Mlp::new(dims, 1).unwrap();
        let grads: Gradients = base.params().iter().map(|p| p.map(|_| 0.5)).collect();

        let mut m = base.clone();
        Sgd::new(&m, 0.0, 0.9, 0.1).step(&mut m, &grads).unwrap();
        assert_eq!(m, base);

        let mut m = base.clone();
        Sgd::new(&m, 0.1, 0.0, 0.0).step(&mut m, &grads).unwrap();
        for (a, b) in m.params().iter().zip(base.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y - 0.1 * 0.5);
            }
        }

        // two momentum steps, unrolled by hand
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut m = base.clone();
        let mut opt = Sgd::new(&m, lr, mu, wd);
        let g2: Gradients = base.params().iter().map(|p| p.map(|_| -0.25)).collect();
        opt.step(&mut m, &grads).unwrap();
        opt.step(&mut m, &g2).unwrap();
        for (a, b) in m.params().iter().zip(base.params()) {
            for (x, &t0) in a.data().iter().zip(b.data()) {
                let v1 = 0.5;
                let t1 = t0 - lr * (v1 + wd * t0);
                let v2 = mu * v1 - 0.25;
                let t2 = t1 - lr * (v2 + wd * t1);
                assert_eq!(*x, t2);
            }
        }

        let bad = vec![Matrix::zeros(1, 1); 6];
        assert!(Sgd::new(&base, 0.1, 0.0, 0.0).step(&mut base.clone(), &bad).is_err());
    }

    #[test]
    fn frozen_head_is_untouched() {
        let mut m = Mlp::new(MlpDims::new(2, 3), 5).unwrap();
        m.head_frozen = true;
        let before = m.clone();
        let grads: Gradients = m.params().iter().map(|p| p.map(|_| 1.0)).collect();
        Sgd::new(&m, 0.1, 0.9, 0.1).step(&mut m, &grads).unwrap();
        assert_eq!(m.head_params(), before.head_params());
        assert_ne!(m.params()[0], before.params()[0]);
    }

    #[test]
    fn source_training_separates_blobs() {
        let (x, y) = blobs(3, 50);
        let mut m = Mlp::new(MlpDims::new(2, 2), 7).unwrap();
        let cfg = SgdConfig {
            epochs: 50,
            ..SgdConfig::default()
        };
        let hist = train_source(&mut m, &x, &y, 0.1, &cfg).unwrap();
        assert_eq!(hist.len(), 50);
        assert!(hist.last().unwrap().loss < hist[0].loss);
        let acc = m.predict(&x).unwrap().iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / 100.0;
        assert!(acc >= 0.95, "accuracy {acc}");

        let mut again = Mlp::new(MlpDims::new(2, 2), 7).unwrap();
        assert_eq!(train_source(&mut again, &x, &y, 0.1, &cfg).unwrap(), hist);
        assert_eq!(again, m);
    }

    #[test]
    fn source_training_rejects_bad_input() {
        let mut m = Mlp::new(MlpDims::new(2, 2), 0).unwrap();
        let cfg = SgdConfig::default();
        assert!(train_source(&mut m, &Matrix::zeros(0, 2), &[], 0.1, &cfg).is_err());
        assert!(train_source(&mut m, &Matrix::zeros(1, 2), &[2], 0.1, &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Mlp::new(MlpDims::new(3, 2), 11).unwrap();
        m.head_frozen = true;
        let json = m.to_json().unwrap();
        let back = Mlp::from_json(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), json);
        let tampered = json.replace("\"version\": 1", "\"version\": 9");
        assert!(Mlp::from_json(&tampered).is_err());
    }
}
