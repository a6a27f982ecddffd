//! The end-to-end run: configuration, on-disk layout and the commands that
//! the `evcal` binary exposes.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/source.csv, data/target.csv, data/manifest.json
//! models/source.json, models/es.json, models/eks.json
//! logs/source_history.jsonl, logs/es_history.jsonl, logs/eks_history.jsonl
//! reports/{es,eks}_eval.json
//! reports/{source,es,eks}_calibration.json, reports/{source,es,eks}_reliability.csv
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt, evaluate, forward_parallel, save_history, AdaptConfig, Evaluation};
use crate::calibration::{ece, reliability_curve, CalibrationReport, DEFAULT_BINS};
use crate::datagen::{self, load_csv, write_dataset, DatasetManifest, DomainSpec, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::network::{train_source, Mlp, MlpDims, SgdConfig, SourceEpoch};
use crate::numerics::{calibrated_softmax, Matrix};
use crate::pseudolabel::{ConstraintKind, PriorKnowledge, PriorSpec};
use crate::seeds::derive_seed;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "EVCAL_THREADS";

/// Adaptation mode: ES trains on raw prototype pseudolabels, EKS rectifies
/// them with prior knowledge first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Es,
    Eks,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Es => "es",
            Mode::Eks => "eks",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "es" => Ok(Mode::Es),
            "eks" => Ok(Mode::Eks),
            other => Err(Error::Config(format!("unknown mode '{other}', expected es or eks"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            hidden: 32,
            bottleneck: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 32,
            label_smoothing: 0.1,
        }
    }
}

impl SourceConfig {
    pub fn sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// Where the constraint for EKS comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kind: ConstraintKind,
    pub sigma: f64,
    /// Explicit class proportions; by default the target's true proportions
    /// recorded in the dataset manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<f64>>,
    /// A prior file (TOML, or JSON by extension) that replaces this section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kind: ConstraintKind::UnaryBound,
            sigma: 0.0,
            priors: None,
            file: None,
        }
    }
}

impl PriorConfig {
    /// Resolves the constraint, reading `file` relative to `base` if set.
    pub fn resolve(&self, base: &Path, target_priors: &[f64]) -> Result<PriorKnowledge> {
        if let Some(file) = &self.file {
            let path = if file.is_absolute() { file.clone() } else { base.join(file) };
            return PriorKnowledge::load(&path);
        }
        let priors = self.priors.clone().unwrap_or_else(|| target_priors.to_vec());
        PriorKnowledge::from_spec(&PriorSpec {
            kind: self.kind,
            priors,
            sigma: self.sigma,
        })
        .map_err(|e| Error::Config(format!("prior: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub bins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every setting of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub mode: Mode,
    pub data: DomainSpec,
    pub source: SourceConfig,
    pub adapt: AdaptConfig,
    pub prior: PriorConfig,
    pub calibration: CalibrationConfig,
    pub output: OutputConfig,
    /// Directory that a relative `prior.file` resolves against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: Mode::Es,
            data: DomainSpec::default(),
            source: SourceConfig::default(),
            adapt: AdaptConfig::default(),
            prior: PriorConfig::default(),
            calibration: CalibrationConfig::default(),
            output: OutputConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.data.validate().map_err(config)?;
        if self.data.seed != 0 {
            return Err(Error::Config("data.seed is derived from the top-level seed; set `seed` instead".into()));
        }
        self.source.sgd(0).validate().map_err(config)?;
        if !(0.0..1.0).contains(&self.source.label_smoothing) {
            return Err(Error::Config(format!(
                "source.label_smoothing must lie in [0, 1), got {}",
                self.source.label_smoothing
            )));
        }
        if self.source.hidden == 0 || self.source.bottleneck == 0 {
            return Err(Error::Config("source.hidden and source.bottleneck must be >= 1".into()));
        }
        self.adapt.validate().map_err(config)?;
        if self.prior.sigma.is_nan() || self.prior.sigma < 0.0 {
            return Err(Error::Config(format!("prior.sigma must be >= 0, got {}", self.prior.sigma)));
        }
        if let Some(p) = &self.prior.priors {
            if p.len() != self.data.classes {
                return Err(Error::Config(format!(
                    "prior.priors has {} entries for {} classes",
                    p.len(),
                    self.data.classes
                )));
            }
            PriorKnowledge::new(self.prior.kind, p.clone(), self.prior.sigma).map_err(config)?;
        }
        if self.calibration.bins == 0 {
            return Err(Error::Config("calibration.bins must be >= 1".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> DomainSpec {
        DomainSpec {
            seed: derive_seed(self.seed, "datagen"),
            ..self.data.clone()
        }
    }

    pub fn dims(&self) -> MlpDims {
        MlpDims {
            input: self.data.dim,
            hidden: self.source.hidden,
            bottleneck: self.source.bottleneck,
            classes: self.data.classes,
        }
    }

    /// Output locations; `output.dir` is relative to the working directory.
    pub fn paths(&self) -> RunPaths {
        RunPaths {
            root: self.output.dir.clone(),
        }
    }

    /// Adaptation settings for `mode`, with the derived seed and, for EKS,
    /// the resolved prior.
    pub fn adapt_config(&self, mode: Mode, target_priors: &[f64]) -> Result<AdaptConfig> {
        let prior = match mode {
            Mode::Es => None,
            Mode::Eks => Some(self.prior.resolve(&self.base_dir, target_priors)?),
        };
        Ok(AdaptConfig {
            prior,
            // both modes share the stream so their runs are paired
            seed: derive_seed(self.seed, "adapt"),
            ..self.adapt.clone()
        })
    }
}

/// File locations of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn source_csv(&self) -> PathBuf {
        self.data_dir().join(datagen::SOURCE_FILE)
    }
    pub fn target_csv(&self) -> PathBuf {
        self.data_dir().join(datagen::TARGET_FILE)
    }
    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join(MANIFEST_FILE)
    }
    pub fn source_model(&self) -> PathBuf {
        self.root.join("models/source.json")
    }
    pub fn adapted_model(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("models/{mode}.json"))
    }
    pub fn source_history(&self) -> PathBuf {
        self.root.join("logs/source_history.jsonl")
    }
    pub fn adapt_history(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("logs/{mode}_history.jsonl"))
    }
    pub fn eval_report(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("reports/{mode}_eval.json"))
    }
    pub fn calibration_report(&self, name: &str) -> PathBuf {
        self.root.join(format!("reports/{name}_calibration.json"))
    }
    pub fn reliability_csv(&self, name: &str) -> PathBuf {
        self.root.join(format!("reports/{name}_reliability.csv"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing {what}; run `{hint}` first")),
        ))
    }
}

/// Sets the global worker count from [`THREADS_ENV`] if present.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // a pool may already exist when called twice in one process; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

/// Result of `gen`.
#[derive(Debug, Clone)]
pub struct GenSummary {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<GenSummary> {
    cfg.validate()?;
    let dir = cfg.paths().data_dir();
    let manifest = write_dataset(&dir, &cfg.spec())?;
    Ok(GenSummary { dir, manifest })
}

fn load_labeled(path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let data = load_csv(path)?;
    let labels = data.require_labels(path)?.to_vec();
    Ok((data.x, labels))
}

fn check_classes(labels: &[usize], classes: usize, path: &Path) -> Result<()> {
    match labels.iter().position(|&y| y >= classes) {
        Some(i) => Err(Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message: format!("label {} out of range for {classes} classes", labels[i]),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model: Mlp,
    pub history: Vec<SourceEpoch>,
}

pub fn cmd_train_source(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let paths = cfg.paths();
    require(&paths.source_csv(), "source data", "evcal gen")?;
    let (x, labels) = load_labeled(&paths.source_csv())?;
    check_classes(&labels, cfg.data.classes, &paths.source_csv())?;
    let (model, history) = train_source_model(cfg, &x, &labels)?;
    ensure_parent(&paths.source_model())?;
    model.save(&paths.source_model())?;
    let mut lines = String::new();
    for h in &history {
        lines.push_str(&serde_json::to_string(h)?);
        lines.push('\n');
    }
    write_text(&paths.source_history(), &lines)?;
    Ok(TrainSummary { model, history })
}

fn train_source_model(cfg: &RunConfig, x: &Matrix, labels: &[usize]) -> Result<(Mlp, Vec<SourceEpoch>)> {
    let mut model = Mlp::new(cfg.dims(), derive_seed(cfg.seed, "network/init"))?;
    let sgd = cfg.source.sgd(derive_seed(cfg.seed, "train-source"));
    let history = train_source(&mut model, x, labels, cfg.source.label_smoothing, &sgd)?;
    Ok((model, history))
}

fn target_priors(paths: &RunPaths) -> Result<Vec<f64>> {
    let manifest = DatasetManifest::load(paths.manifest())?;
    Ok(manifest.spec.target_priors())
}

#[derive(Debug, Clone)]
pub struct AdaptSummary {
    pub mode: Mode,
    pub model: Mlp,
    pub history: Vec<crate::adaptation::AdaptEpoch>,
    pub prior: Option<PriorKnowledge>,
}

pub fn cmd_adapt(cfg: &RunConfig, mode: Mode) -> Result<AdaptSummary> {
    cfg.validate()?;
    let paths = cfg.paths();
    require(&paths.source_model(), "source checkpoint", "evcal train-source")?;
    require(&paths.target_csv(), "target data", "evcal gen")?;
    let source = Mlp::load(&paths.source_model())?;
    let target = load_csv(paths.target_csv())?;
    let priors = match mode {
        Mode::Es => Vec::new(),
        Mode::Eks => target_priors(&paths)?,
    };
    let acfg = cfg.adapt_config(mode, &priors)?;
    if let Some(y) = &target.labels {
        check_classes(y, cfg.data.classes, &paths.target_csv())?;
    }
    let out = adapt(&source, &target.x, &acfg, target.labels.as_deref())?;
    ensure_parent(&paths.adapted_model(mode))?;
    out.model.save(&paths.adapted_model(mode))?;
    ensure_parent(&paths.adapt_history(mode))?;
    save_history(&out.history, paths.adapt_history(mode))?;
    Ok(AdaptSummary {
        mode,
        model: out.model,
        history: out.history,
        prior: acfg.prior,
    })
}

/// Source-only and adapted accuracy on the labelled target set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub source: Evaluation,
    pub adapted: Evaluation,
    /// `adapted.accuracy − source.accuracy`.
    pub difference: f64,
}

pub fn cmd_eval(cfg: &RunConfig, mode: Mode) -> Result<EvalReport> {
    cfg.validate()?;
    let paths = cfg.paths();
    require(&paths.source_model(), "source checkpoint", "evcal train-source")?;
    require(&paths.adapted_model(mode), "adapted checkpoint", &format!("evcal adapt --mode {mode}"))?;
    let (x, labels) = load_labeled(&paths.target_csv())?;
    check_classes(&labels, cfg.data.classes, &paths.target_csv())?;
    let source = evaluate(&Mlp::load(&paths.source_model())?, &x, &labels)?;
    let adapted = evaluate(&Mlp::load(&paths.adapted_model(mode))?, &x, &labels)?;
    let report = EvalReport {
        mode,
        difference: adapted.accuracy - source.accuracy,
        source,
        adapted,
    };
    write_json(&paths.eval_report(mode), &report)?;
    Ok(report)
}

/// Calibration of one model on the labelled target set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCalibration {
    /// `source`, `es` or `eks`.
    pub model: String,
    pub gamma: f64,
    pub accuracy: f64,
    /// Constraint kind (UB or BR) for EKS runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub calibration: CalibrationReport,
}

/// Calibration of a model's calibrated-softmax outputs.
pub fn calibrate_model(model: &Mlp, x: &Matrix, labels: &[usize], gamma: f64, bins: usize) -> Result<(f64, CalibrationReport)> {
    let (_, logits) = forward_parallel(model, x)?;
    let probs = calibrated_softmax(&logits, gamma)?;
    let acc = crate::adaptation::evaluate_logits(&logits, labels)?.accuracy;
    Ok((acc, ece(&probs, labels, bins)?))
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub source: ModelCalibration,
    pub adapted: ModelCalibration,
}

pub fn cmd_report(cfg: &RunConfig, mode: Mode) -> Result<ReportSummary> {
    cfg.validate()?;
    let paths = cfg.paths();
    require(&paths.source_model(), "source checkpoint", "evcal train-source")?;
    require(&paths.adapted_model(mode), "adapted checkpoint", &format!("evcal adapt --mode {mode}"))?;
    let (x, labels) = load_labeled(&paths.target_csv())?;
    check_classes(&labels, cfg.data.classes, &paths.target_csv())?;
    let gamma = cfg.adapt.weights.gamma;
    let bins = cfg.calibration.bins;
    let prior = match mode {
        Mode::Es => None,
        Mode::Eks => Some(cfg.prior.resolve(&cfg.base_dir, &target_priors(&paths)?)?),
    };
    let mut out = Vec::new();
    for (name, path) in [("source".to_string(), paths.source_model()), (mode.to_string(), paths.adapted_model(mode))] {
        let model = Mlp::load(&path)?;
        let (accuracy, report) = calibrate_model(&model, &x, &labels, gamma, bins)?;
        let is_eks = name == "eks";
        let entry = ModelCalibration {
            model: name.clone(),
            gamma,
            accuracy,
            kappa: prior.as_ref().filter(|_| is_eks).map(|p| p.kind().to_string()),
            sigma: prior.as_ref().filter(|_| is_eks).map(|p| p.sigma()),
            calibration: report,
        };
        write_json(&paths.calibration_report(&name), &entry)?;
        reliability_curve(&entry.calibration).save_csv(paths.reliability_csv(&name))?;
        out.push(entry);
    }
    let adapted = out.pop().expect("two entries");
    let source = out.pop().expect("two entries");
    Ok(ReportSummary { source, adapted })
}

/// In-memory metrics of one seeded run, used by the directional checks.
#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub seed: u64,
    pub source_accuracy: f64,
    pub source_ece: f64,
    pub es_accuracy: f64,
    pub es_ece: f64,
    /// `(sigma, accuracy, ece)` per requested EKS run.
    pub eks: Vec<(f64, f64, f64)>,
}

/// Generates data, trains a source model and adapts it in ES mode and in
/// EKS mode for every `sigma`, all without touching the disk.
pub fn run_trial(cfg: &RunConfig, sigmas: &[f64]) -> Result<TrialResult> {
    cfg.validate()?;
    let spec = cfg.spec();
    let pair = datagen::generate_pair(&spec)?;
    let (source, _) = train_source_model(cfg, &pair.source.x, &pair.source.labels)?;
    let gamma = cfg.adapt.weights.gamma;
    let bins = cfg.calibration.bins;
    let (tx, ty) = (&pair.target.x, &pair.target.labels[..]);
    let (source_accuracy, source_cal) = calibrate_model(&source, tx, ty, gamma, bins)?;
    let priors = spec.target_priors();
    let es = adapt(&source, tx, &cfg.adapt_config(Mode::Es, &priors)?, None)?;
    let (es_accuracy, es_cal) = calibrate_model(&es.model, tx, ty, gamma, bins)?;
    let mut eks = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut c = cfg.clone();
        c.prior.sigma = sigma;
        let run = adapt(&source, tx, &c.adapt_config(Mode::Eks, &priors)?, None)?;
        let (acc, cal) = calibrate_model(&run.model, tx, ty, gamma, bins)?;
        eks.push((sigma, acc, cal.ece));
    }
    Ok(TrialResult {
        seed: cfg.seed,
        source_accuracy,
        source_ece: source_cal.ece,
        es_accuracy,
        es_ece: es_cal.ece,
        eks,
    })
}
