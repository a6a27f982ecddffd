//! Python bindings for `evcal`.
//!
//! Matrices cross the boundary as lists of rows. Reports come back as plain
//! dicts decoded from the same JSON the CLI writes.

use std::path::PathBuf;

use evcal::calibration;
use evcal::losses::evidence_from_logits;
use evcal::network::{Mlp, MlpDims};
use evcal::numerics::{self, calibrated_softmax};
use evcal::pipeline::{self, Mode, RunConfig};
use evcal::pseudolabel::{self, ConstraintKind, PriorKnowledge};
use evcal::verify::{self, VerifyOptions};
use evcal::{Error, Matrix};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        Error::Domain(_) | Error::Shape { .. } | Error::NonFinite(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;

fn matrix(rows: Rows) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn to_dict<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().map_err(to_py)
}

fn parse_kind(kind: &str) -> PyResult<ConstraintKind> {
    match kind.to_ascii_lowercase().as_str() {
        "ub" => Ok(ConstraintKind::UnaryBound),
        "br" => Ok(ConstraintKind::BinaryRelationship),
        other => Err(PyValueError::new_err(format!("unknown constraint kind '{other}', expected ub or br"))),
    }
}

/// Class-proportion prior: `Prior("ub", [0.5, 0.3, 0.2], sigma=0.1)` or `Prior("br", ...)`.
#[pyclass(name = "Prior", module = "pyevcal", frozen)]
struct PyPrior {
    inner: PriorKnowledge,
}

#[pymethods]
impl PyPrior {
    #[new]
    #[pyo3(signature = (kind, priors, sigma = 0.0))]
    fn new(kind: &str, priors: Vec<f64>, sigma: f64) -> PyResult<Self> {
        let inner = PriorKnowledge::new(parse_kind(kind)?, priors, sigma).map_err(to_py)?;
        Ok(PyPrior { inner })
    }

    /// Reads a prior file (TOML, or JSON by extension).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPrior {
            inner: PriorKnowledge::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn priors(&self) -> Vec<f64> {
        self.inner.priors().to_vec()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    /// Constraint violations of a labelling; empty when it is feasible.
    fn violations(&self, labels: Vec<usize>) -> Vec<String> {
        match pseudolabel::check_constraints(&labels, &self.inner) {
            Ok(()) => Vec::new(),
            Err(v) => v.iter().map(|v| v.to_string()).collect(),
        }
    }

    fn __repr__(&self) -> String {
        format!("Prior({:?}, {:?}, sigma={})", self.kind(), self.inner.priors(), self.inner.sigma())
    }
}

/// The feature extractor plus classifier head.
#[pyclass(name = "Model", module = "pyevcal", frozen)]
struct PyModel {
    inner: Mlp,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised network with the default hidden sizes.
    #[new]
    #[pyo3(signature = (inputs, classes, seed = 0))]
    fn new(inputs: usize, classes: usize, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: Mlp::new(MlpDims::new(inputs, classes), seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: Mlp::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: Mlp::from_json(text).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    /// `(input, hidden, bottleneck, classes)`.
    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.inner.dims();
        (d.input, d.hidden, d.bottleneck, d.classes)
    }

    /// Bottleneck features and logits for a batch of rows.
    fn forward(&self, x: Rows) -> PyResult<(Rows, Rows)> {
        let (features, logits) = self.inner.forward(&matrix(x)?).map_err(to_py)?;
        Ok((features.to_rows(), logits.to_rows()))
    }

    fn predict(&self, x: Rows) -> PyResult<Vec<usize>> {
        self.inner.predict(&matrix(x)?).map_err(to_py)
    }
}

/// A run configuration plus the pipeline steps that use it.
#[pyclass(name = "RunConfig", module = "pyevcal")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Loads `path` if given, otherwise starts from the defaults.
    #[new]
    #[pyo3(signature = (path = None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::load(&p).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_toml_str(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = parse_mode(mode)?;
        Ok(())
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.prior.sigma
    }

    #[setter]
    fn set_sigma(&mut self, sigma: f64) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.prior.sigma = sigma;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.output.dir.clone()
    }

    #[setter]
    fn set_out(&mut self, dir: PathBuf) {
        self.inner.output.dir = dir;
    }

    /// Writes the synthetic dataset and returns the manifest as a dict.
    fn gen(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = py.detach(|| pipeline::cmd_gen(&self.inner)).map_err(to_py)?;
        to_dict(py, &s.manifest)
    }

    /// Trains and saves the source model; returns the per-epoch history.
    fn train_source(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = py.detach(|| pipeline::cmd_train_source(&self.inner)).map_err(to_py)?;
        to_dict(py, &s.history)
    }

    /// Adapts the source model; returns the per-epoch history.
    #[pyo3(signature = (mode = None))]
    fn adapt(&self, py: Python<'_>, mode: Option<&str>) -> PyResult<Py<PyAny>> {
        let mode = mode.map(parse_mode).transpose()?.unwrap_or(self.inner.mode);
        let s = py.detach(|| pipeline::cmd_adapt(&self.inner, mode)).map_err(to_py)?;
        to_dict(py, &s.history)
    }

    #[pyo3(signature = (mode = None))]
    fn eval(&self, py: Python<'_>, mode: Option<&str>) -> PyResult<Py<PyAny>> {
        let mode = mode.map(parse_mode).transpose()?.unwrap_or(self.inner.mode);
        let r = py.detach(|| pipeline::cmd_eval(&self.inner, mode)).map_err(to_py)?;
        to_dict(py, &r)
    }

    /// Writes calibration reports; returns `[source, adapted]`.
    #[pyo3(signature = (mode = None))]
    fn report(&self, py: Python<'_>, mode: Option<&str>) -> PyResult<Py<PyAny>> {
        let mode = mode.map(parse_mode).transpose()?.unwrap_or(self.inner.mode);
        let r = py.detach(|| pipeline::cmd_report(&self.inner, mode)).map_err(to_py)?;
        to_dict(py, &[r.source, r.adapted])
    }

    /// Full in-memory run: source-only, ES and EKS for each sigma.
    #[pyo3(signature = (sigmas = vec![0.0]))]
    fn trial(&self, py: Python<'_>, sigmas: Vec<f64>) -> PyResult<Py<PyAny>> {
        let r = py.detach(|| pipeline::run_trial(&self.inner, &sigmas)).map_err(to_py)?;
        to_dict(py, &r)
    }
}

#[pyfunction]
fn lgamma(x: f64) -> PyResult<f64> {
    numerics::lgamma(x).map_err(to_py)
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    numerics::digamma(x).map_err(to_py)
}

#[pyfunction]
fn trigamma(x: f64) -> PyResult<f64> {
    numerics::trigamma(x).map_err(to_py)
}

/// `(e^o + gamma) / Σ (e^o + gamma)` row by row.
#[pyfunction]
#[pyo3(name = "calibrated_softmax", signature = (logits, gamma = 1.0))]
fn py_calibrated_softmax(logits: Rows, gamma: f64) -> PyResult<Rows> {
    Ok(calibrated_softmax(&matrix(logits)?, gamma).map_err(to_py)?.to_rows())
}

/// Expected Dirichlet probabilities `α / S` with `α = e^o + lam`.
#[pyfunction]
#[pyo3(signature = (logits, lam = 1.0))]
fn evidence_probabilities(logits: Rows, lam: f64) -> PyResult<Rows> {
    Ok(evidence_from_logits(&matrix(logits)?, lam).map_err(to_py)?.probabilities().to_rows())
}

/// Most likely labelling of `probs` that satisfies `prior`.
#[pyfunction]
#[pyo3(name = "rectify")]
fn py_rectify(probs: Rows, prior: &PyPrior) -> PyResult<Vec<usize>> {
    Ok(pseudolabel::rectify(&matrix(probs)?, &prior.inner).map_err(to_py)?.labels)
}

/// Calibration report (ECE, NLL, per-bin statistics) as a dict.
#[pyfunction]
#[pyo3(name = "ece", signature = (probs, labels, bins = calibration::DEFAULT_BINS))]
fn py_ece(py: Python<'_>, probs: Rows, labels: Vec<usize>, bins: usize) -> PyResult<Py<PyAny>> {
    let report = calibration::ece(&matrix(probs)?, &labels, bins).map_err(to_py)?;
    to_dict(py, &report)
}

/// Runs the self checks; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(name = "verify")]
fn py_verify(py: Python<'_>) -> Vec<(String, bool, String)> {
    let summary = py.detach(|| verify::run_all(&VerifyOptions::default()));
    summary.checks.into_iter().map(|c| (c.name, c.passed, c.detail)).collect()
}

#[pymodule]
fn pyevcal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPrior>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(lgamma, m)?)?;
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(trigamma, m)?)?;
    m.add_function(wrap_pyfunction!(py_calibrated_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(evidence_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(py_rectify, m)?)?;
    m.add_function(wrap_pyfunction!(py_ece, m)?)?;
    m.add_function(wrap_pyfunction!(py_verify, m)?)?;
    Ok(())
}
