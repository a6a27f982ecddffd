//! Synthetic two-domain data and CSV feature files.
//!
//! Each class is an isotropic Gaussian. The target domain rotates the class
//! means in the first two dimensions and then translates them, so a model fit
//! on the source sees a systematic shift on the target.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seeds;

/// Generator settings for one source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub classes: usize,
    /// Exact number of source samples per class.
    pub n_per_class: Vec<usize>,
    /// Exact number of target samples per class; defaults to `n_per_class`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_per_class: Option<Vec<usize>>,
    pub dim: usize,
    /// Explicit `classes × dim` means. When absent the means sit evenly on a
    /// circle of `mean_radius` in dims 0 and 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_means: Option<Vec<Vec<f64>>>,
    pub mean_radius: f64,
    /// Per-dimension variance of every class.
    pub cov_scale: f64,
    /// Target translation, one entry per dimension (empty means zero).
    pub shift: Vec<f64>,
    /// Target rotation of the means in dims 0 and 1, radians.
    pub rotation: f64,
    /// Probability that a source label is replaced by a different class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            classes: 3,
            n_per_class: vec![200, 120, 80],
            target_per_class: Some(vec![60, 240, 100]),
            dim: 8,
            class_means: None,
            mean_radius: 3.0,
            cov_scale: 1.0,
            shift: vec![],
            rotation: 0.8,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        for (name, counts) in [("n_per_class", Some(&self.n_per_class)), ("target_per_class", self.target_per_class.as_ref())] {
            let Some(counts) = counts else { continue };
            if counts.len() != self.classes {
                return bad(format!("{name} has {} entries for {} classes", counts.len(), self.classes));
            }
            if counts.iter().sum::<usize>() == 0 {
                return bad(format!("{name} must contain at least one sample"));
            }
        }
        if !(self.cov_scale > 0.0 && self.cov_scale.is_finite()) {
            return bad(format!("cov_scale must be > 0, got {}", self.cov_scale));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise must be in [0, 0.5), got {}", self.label_noise));
        }
        if !self.shift.is_empty() && self.shift.len() != self.dim {
            return bad(format!("shift has {} entries for dim {}", self.shift.len(), self.dim));
        }
        if !self.rotation.is_finite() || self.shift.iter().any(|v| !v.is_finite()) {
            return bad("shift and rotation must be finite".into());
        }
        let means = self.means()?;
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                if means.row(a) == means.row(b) {
                    return bad(format!("class means {a} and {b} coincide"));
                }
            }
        }
        Ok(())
    }

    /// Source class means as a `classes × dim` matrix.
    pub fn means(&self) -> Result<Matrix> {
        match &self.class_means {
            Some(rows) => {
                if rows.len() != self.classes || rows.iter().any(|r| r.len() != self.dim) {
                    return Err(Error::Config(format!(
                        "class_means must be {} x {}",
                        self.classes, self.dim
                    )));
                }
                Matrix::from_rows(rows)
            }
            None => {
                if !(self.mean_radius > 0.0 && self.mean_radius.is_finite()) {
                    return Err(Error::Config(format!("mean_radius must be > 0, got {}", self.mean_radius)));
                }
                let mut m = Matrix::zeros(self.classes, self.dim);
                for k in 0..self.classes {
                    let angle = TAU * k as f64 / self.classes as f64;
                    m[(k, 0)] = self.mean_radius * angle.cos();
                    m[(k, 1)] = self.mean_radius * angle.sin();
                }
                Ok(m)
            }
        }
    }

    /// Target class means: rotated in dims 0 and 1, then shifted.
    pub fn target_means(&self) -> Result<Matrix> {
        let mut m = self.means()?;
        let (sin, cos) = self.rotation.sin_cos();
        for k in 0..self.classes {
            let (x, y) = (m[(k, 0)], m[(k, 1)]);
            m[(k, 0)] = cos * x - sin * y;
            m[(k, 1)] = sin * x + cos * y;
            for (d, s) in self.shift.iter().enumerate() {
                m[(k, d)] += s;
            }
        }
        Ok(m)
    }

    pub fn target_counts(&self) -> &[usize] {
        self.target_per_class.as_deref().unwrap_or(&self.n_per_class)
    }

    /// Class proportions of the generated target set.
    pub fn target_priors(&self) -> Vec<f64> {
        let counts = self.target_counts();
        let n: usize = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / n as f64).collect()
    }
}

/// Features with (possibly held-out) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Labelled source set and a target set whose labels are kept for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: Dataset,
    pub target: Dataset,
}

fn sample(means: &Matrix, counts: &[usize], std: f64, rng: &mut impl Rng) -> Dataset {
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(rng);
    let noise = Normal::new(0.0, std).expect("positive std");
    let dim = means.cols();
    let mut x = Matrix::zeros(labels.len(), dim);
    for (i, &y) in labels.iter().enumerate() {
        for (v, mu) in x.row_mut(i).iter_mut().zip(means.row(y)) {
            *v = mu + noise.sample(rng);
        }
    }
    Dataset { x, labels }
}

/// Draws the source and target sets. Identical specs give bit-identical data.
pub fn generate_pair(spec: &DomainSpec) -> Result<DomainPair> {
    spec.validate()?;
    let std = spec.cov_scale.sqrt();
    let mut source = sample(&spec.means()?, &spec.n_per_class, std, &mut seeds::stream(spec.seed, "datagen/source"));
    let target = sample(
        &spec.target_means()?,
        spec.target_counts(),
        std,
        &mut seeds::stream(spec.seed, "datagen/target"),
    );
    if spec.label_noise > 0.0 {
        let mut rng = seeds::stream(spec.seed, "datagen/noise");
        for y in source.labels.iter_mut() {
            if rng.random::<f64>() < spec.label_noise {
                let other = rng.random_range(0..spec.classes - 1);
                *y = if other >= *y { other + 1 } else { other };
            }
        }
    }
    Ok(DomainPair { source, target })
}

/// Contents of a feature CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvData {
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl CsvData {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Labels, or a validation error naming the file.
    pub fn require_labels(&self, path: &Path) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no label column".into(),
        })
    }
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a CSV with header `f0,...,f{d-1}` and an optional trailing `label`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<CsvData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_error(path, 1, "empty file, expected a header row")),
        Some(r) => r.map_err(|e| parse_error(path, 1, e.to_string()))?,
    };
    let has_label = header.iter().next_back() == Some("label");
    let dim = header.len() - usize::from(has_label);
    if dim == 0 {
        return Err(parse_error(path, 1, "header names no feature columns"));
    }
    for (j, name) in header.iter().take(dim).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_error(path, 1, format!("expected column f{j}, found '{name}'")));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for (j, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, format!("column f{j}: '{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(path, line, format!("column f{j}: non-finite value '{cell}'")));
            }
            data.push(v);
        }
        if has_label {
            let cell = &record[dim];
            let y: usize = cell
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, format!("label '{cell}' is not a class index")))?;
            labels.push(y);
        }
    }
    let rows = data.len() / dim;
    Ok(CsvData {
        x: Matrix::from_vec(rows, dim, data)?,
        labels: has_label.then_some(labels),
    })
}

/// Writes features (and labels) with shortest round-trip float formatting.
pub fn save_csv(path: impl AsRef<Path>, x: &Matrix, labels: Option<&[usize]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(l) = labels {
        if l.len() != x.rows() {
            return Err(Error::shape(format!("{} labels", x.rows()), format!("{} labels", l.len())));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("f{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    let mut cells: Vec<String> = Vec::with_capacity(header.len());
    for (i, row) in x.iter_rows().enumerate() {
        cells.clear();
        cells.extend(row.iter().map(|v| v.to_string()));
        if let Some(l) = labels {
            cells.push(l[i].to_string());
        }
        w.write_record(&cells).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One file listed in a [`DatasetManifest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub has_labels: bool,
    pub class_counts: Vec<usize>,
    pub sha256: String,
}

/// Written beside generated CSVs: the generating spec and file checksums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: DomainSpec,
    pub files: Vec<ManifestFile>,
}

pub const SOURCE_FILE: &str = "source.csv";
pub const TARGET_FILE: &str = "target.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recomputes every checksum and reports the files that differ.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.files {
            if sha256_file(dir.as_ref().join(&f.name))? != f.sha256 {
                bad.push(f.name.clone());
            }
        }
        Ok(bad)
    }
}

/// Generates a pair and writes `source.csv`, `target.csv` and `manifest.json`
/// into `dir`. The target file keeps its labels for evaluation; adaptation
/// never reads them except as a monitor.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DomainSpec) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pair = generate_pair(spec)?;
    let mut files = Vec::new();
    for (name, set) in [(SOURCE_FILE, &pair.source), (TARGET_FILE, &pair.target)] {
        let path: PathBuf = dir.join(name);
        save_csv(&path, &set.x, Some(&set.labels))?;
        files.push(ManifestFile {
            name: name.into(),
            rows: set.len(),
            cols: set.x.cols(),
            has_labels: true,
            class_counts: set.class_counts(spec.classes),
            sha256: sha256_file(&path)?,
        });
    }
    let manifest = DatasetManifest {
        format: "evcal-dataset".into(),
        version: 1,
        spec: spec.clone(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_counts_are_exact() {
        let spec = DomainSpec::default();
        let pair = generate_pair(&spec).unwrap();
        assert_eq!(pair.source.class_counts(3), spec.n_per_class);
        assert_eq!(pair.target.class_counts(3), spec.target_counts());
        assert_eq!(pair.source.x.shape(), (400, 8));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = DomainSpec::default();
        assert_eq!(generate_pair(&spec).unwrap(), generate_pair(&spec).unwrap());
        let other = DomainSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_pair(&spec).unwrap().source.x, generate_pair(&other).unwrap().source.x);
    }

    #[test]
    fn no_shift_means_same_distribution() {
        let spec = DomainSpec {
            n_per_class: vec![2000, 2000],
            target_per_class: None,
            classes: 2,
            rotation: 0.0,
            ..DomainSpec::default()
        };
        let pair = generate_pair(&spec).unwrap();
        let n = 4000.0;
        let ms = pair.source.x.sum_rows();
        let mt = pair.target.x.sum_rows();
        // mixture variance per dim is at most cov_scale + radius^2
        let sd = (spec.cov_scale + spec.mean_radius.powi(2)).sqrt();
        for d in 0..spec.dim {
            let diff = (ms[d] - mt[d]).abs() / n;
            assert!(diff < 4.0 * sd * (2.0 / n).sqrt(), "dim {d}: {diff}");
        }
    }

    #[test]
    fn rotation_and_shift_move_means() {
        let spec = DomainSpec {
            classes: 2,
            rotation: std::f64::consts::FRAC_PI_2,
            shift: vec![1.0; 8],
            ..DomainSpec::default()
        };
        let t = spec.target_means().unwrap();
        assert!((t[(0, 0)] - 1.0).abs() < 1e-12 && (t[(0, 1)] - 4.0).abs() < 1e-12);
        assert_eq!(t[(0, 5)], 1.0);
    }

    #[test]
    fn validation() {
        let bad = [
            DomainSpec { classes: 1, n_per_class: vec![5], target_per_class: None, ..DomainSpec::default() },
            DomainSpec { cov_scale: 0.0, ..DomainSpec::default() },
            DomainSpec { label_noise: 0.5, ..DomainSpec::default() },
            DomainSpec { shift: vec![1.0], ..DomainSpec::default() },
            DomainSpec { n_per_class: vec![1, 2], ..DomainSpec::default() },
            DomainSpec {
                classes: 2,
                n_per_class: vec![1, 1],
                target_per_class: None,
                class_means: Some(vec![vec![0.0; 8], vec![0.0; 8]]),
                ..DomainSpec::default()
            },
        ];
        for spec in bad {
            assert!(matches!(spec.validate(), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn label_noise_flips_to_other_classes() {
        let spec = DomainSpec { label_noise: 0.3, ..DomainSpec::default() };
        let clean = generate_pair(&DomainSpec::default()).unwrap();
        let noisy = generate_pair(&spec).unwrap();
        let flipped = clean.source.labels.iter().zip(&noisy.source.labels).filter(|(a, b)| a != b).count();
        assert!((80..160).contains(&flipped), "{flipped}");
        assert_eq!(clean.source.x, noisy.source.x);
    }
}
