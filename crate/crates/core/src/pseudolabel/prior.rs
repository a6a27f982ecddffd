//! Prior knowledge about the target label distribution.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ a_k = 1`.
const PRIOR_SUM_TOL: f64 = 1e-9;
/// Slack used when rounding fractional count bounds to integers, so values
/// such as `10 · 0.3 = 3.0000000000000004` round as intended.
const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// Unary bound: `a_k(1−σ) ≤ p_k ≤ a_k(1+σ)` for every class.
    #[serde(rename = "ub")]
    UnaryBound,
    /// Binary relationship: class proportions follow the descending order of
    /// the priors.
    #[serde(rename = "br")]
    BinaryRelationship,
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintKind::UnaryBound => "UB",
            ConstraintKind::BinaryRelationship => "BR",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorKnowledge {
    kind: ConstraintKind,
    priors: Vec<f64>,
    sigma: f64,
    class_order: Vec<usize>,
}

/// Serialized form of [`PriorKnowledge`] (TOML or JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub kind: ConstraintKind,
    pub priors: Vec<f64>,
    #[serde(default)]
    pub sigma: f64,
}

impl PriorKnowledge {
    pub fn new(kind: ConstraintKind, priors: Vec<f64>, sigma: f64) -> Result<Self> {
        if priors.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "prior needs at least 2 classes, got {}",
                priors.len()
            )));
        }
        if let Some((k, a)) = priors.iter().enumerate().find(|(_, a)| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::InvalidArgument(format!("prior a_{k} = {a} must be finite and >= 0")));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > PRIOR_SUM_TOL {
            return Err(Error::InvalidArgument(format!("priors must sum to 1, got {total}")));
        }
        if sigma.is_nan() || sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        let mut class_order: Vec<usize> = (0..priors.len()).collect();
        class_order.sort_by(|&a, &b| priors[b].total_cmp(&priors[a]).then(a.cmp(&b)));
        Ok(PriorKnowledge {
            kind,
            priors,
            sigma,
            class_order,
        })
    }

    pub fn unary_bound(priors: Vec<f64>, sigma: f64) -> Result<Self> {
        Self::new(ConstraintKind::UnaryBound, priors, sigma)
    }

    pub fn binary_relationship(priors: Vec<f64>) -> Result<Self> {
        Self::new(ConstraintKind::BinaryRelationship, priors, 0.0)
    }

    /// Priors set to the empirical class frequencies of `labels`.
    pub fn from_labels(kind: ConstraintKind, labels: &[usize], classes: usize, sigma: f64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("cannot estimate priors from no labels".into()));
        }
        let mut counts = vec![0usize; classes];
        for &y in labels {
            if y >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            counts[y] += 1;
        }
        let n = labels.len() as f64;
        Self::new(kind, counts.iter().map(|&c| c as f64 / n).collect(), sigma)
    }

    pub fn from_spec(spec: &PriorSpec) -> Result<Self> {
        Self::new(spec.kind, spec.priors.clone(), spec.sigma)
    }

    pub fn to_spec(&self) -> PriorSpec {
        PriorSpec {
            kind: self.kind,
            priors: self.priors.clone(),
            sigma: self.sigma,
        }
    }

    /// Reads a prior file; `.json` files are parsed as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: PriorSpec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Self::from_spec(&spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_spec()).expect("prior spec serializes")
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn classes(&self) -> usize {
        self.priors.len()
    }

    /// Classes sorted by descending prior, ties broken by class index.
    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    /// Integer count bounds `[⌊N·a_k(1−σ)⌋, ⌈N·a_k(1+σ)⌉]` clipped to `[0, N]`.
    pub fn count_bounds(&self, n: usize) -> Vec<(usize, usize)> {
        let nf = n as f64;
        self.priors
            .iter()
            .map(|&a| {
                if self.sigma.is_infinite() {
                    return (0, n);
                }
                let lo = (nf * a * (1.0 - self.sigma) + ROUNDING_SLACK).floor().max(0.0);
                let hi = (nf * a * (1.0 + self.sigma) - ROUNDING_SLACK).ceil().max(0.0);
                (lo as usize, (hi as usize).min(n))
            })
            .collect()
    }
}
