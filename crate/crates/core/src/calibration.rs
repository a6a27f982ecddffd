//! Calibration metrics: expected calibration error, negative log-likelihood
//! and reliability-curve data.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Bin count used throughout the reports.
pub const DEFAULT_BINS: usize = 15;

/// Probabilities are floored here before taking logs.
pub const NLL_FLOOR: f64 = 1e-12;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// One equal-width confidence bin `(lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    /// Mean max-probability of the samples in the bin, 0 when empty.
    pub confidence: f64,
    /// Fraction of samples whose label is among the row's maximisers, 0 when empty.
    pub accuracy: f64,
}

/// ECE, NLL and the per-bin statistics they were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub m: usize,
    pub n: usize,
    pub ece: f64,
    pub nll: f64,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationReport {
    /// Recomputes ECE from the `bins` field alone.
    pub fn ece_from_bins(&self) -> f64 {
        ece_from_bins(&self.bins, self.n)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn ece_from_bins(bins: &[CalibrationBin], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

/// Right edges of `m` equal-width bins over `(0, 1]`; the last edge is exactly 1.
pub fn bin_edges(m: usize) -> Vec<f64> {
    (0..=m).map(|j| j as f64 / m as f64).collect()
}

/// Index of the bin `(e_j, e_{j+1}]` holding `confidence`.
/// Values at or below 0 fall into the first bin.
pub fn bin_index(edges: &[f64], confidence: f64) -> usize {
    let m = edges.len() - 1;
    // first right edge >= confidence
    edges[1..].partition_point(|&e| e < confidence).min(m - 1)
}

fn check_inputs(probs: &Matrix, labels: &[usize]) -> Result<()> {
    let (n, k) = probs.shape();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), format!("{} labels", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&y| y >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {} at row {i} out of range for {k} classes",
            labels[i]
        )));
    }
    probs.ensure_finite("probabilities")?;
    for (i, row) in probs.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Max probability of a row and whether `label` attains it.
fn confidence_and_hit(row: &[f64], label: usize) -> (f64, bool) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max, row[label] == max)
}

/// Neumaier summation, so bins of short decimal confidences average exactly.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Expected calibration error over `m` equal-width bins, plus NLL.
pub fn ece(probs: &Matrix, labels: &[usize], m: usize) -> Result<CalibrationReport> {
    if m == 0 {
        return Err(Error::InvalidArgument("bin count must be >= 1".into()));
    }
    check_inputs(probs, labels)?;
    let edges = bin_edges(m);
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![CompensatedSum::default(); m];
    let mut hits = vec![0usize; m];
    for (row, &y) in probs.iter_rows().zip(labels) {
        let (c, hit) = confidence_and_hit(row, y);
        let b = bin_index(&edges, c);
        count[b] += 1;
        conf_sum[b].add(c);
        hits[b] += usize::from(hit);
    }
    let bins: Vec<CalibrationBin> = (0..m)
        .map(|b| {
            let (confidence, accuracy) = if count[b] > 0 {
                let cnt = count[b] as f64;
                (conf_sum[b].value() / cnt, hits[b] as f64 / cnt)
            } else {
                (0.0, 0.0)
            };
            CalibrationBin {
                bin_lo: edges[b],
                bin_hi: edges[b + 1],
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    let n = labels.len();
    Ok(CalibrationReport {
        m,
        n,
        ece: ece_from_bins(&bins, n),
        nll: nll_unchecked(probs, labels),
        bins,
    })
}

/// Mean negative log-probability of the true class, floored at [`NLL_FLOOR`].
pub fn nll(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_inputs(probs, labels)?;
    Ok(nll_unchecked(probs, labels))
}

fn nll_unchecked(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| -row[y].max(NLL_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

/// One plotted point of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

/// Plot-ready reliability data: non-empty bins and the `x = y` reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub points: Vec<ReliabilityPoint>,
    pub identity: [(f64, f64); 2],
}

impl ReliabilityCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub fn reliability_curve(report: &CalibrationReport) -> ReliabilityCurve {
    ReliabilityCurve {
        points: report
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| ReliabilityPoint {
                bin_lo: b.bin_lo,
                bin_hi: b.bin_hi,
                count: b.count,
                confidence: b.confidence,
                accuracy: b.accuracy,
            })
            .collect(),
        identity: [(0.0, 0.0), (1.0, 1.0)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_force_ece;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-class rows with the given confidence on class 0.
    fn binary(confidences: &[f64]) -> Matrix {
        Matrix::from_rows(&confidences.iter().map(|&c| vec![c, 1.0 - c]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_cases() {
        let p = binary(&[0.9, 0.8, 0.7, 0.6]);
        let r = ece(&p, &[0, 0, 1, 0], 1).unwrap();
        assert_eq!(r.ece, 0.0);
        let r = ece(&p, &[0, 1, 1, 0], 1).unwrap();
        assert_eq!(r.ece, 0.25);
        assert_eq!(r.bins[0].count, 4);
    }

    #[test]
    fn nll_examples() {
        let uniform = Matrix::filled(3, 4, 0.25);
        assert!((nll(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let p = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.75, 0.25]]).unwrap();
        assert!((nll(&p, &[0, 1]).unwrap() - 1.0397207708399179).abs() < 1e-12);
        let perfect = Matrix::one_hot(&[1, 0], 2).unwrap();
        assert_eq!(nll(&perfect, &[1, 0]).unwrap(), 0.0);
        assert!(nll(&perfect, &[0, 1]).unwrap() > 27.0);
        assert!(matches!(nll(&perfect, &[2, 0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Matrix::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(ece(&p, &[0], 15).is_err());
        let p = binary(&[0.5]);
        assert!(ece(&p, &[0], 0).is_err());
        assert!(ece(&p, &[0, 1], 15).is_err());
    }

    #[test]
    fn right_inclusive_edges() {
        let edges = bin_edges(10);
        assert_eq!(bin_index(&edges, 0.1), 0);
        assert_eq!(bin_index(&edges, 0.1000001), 1);
        assert_eq!(bin_index(&edges, 1.0), 9);
        assert_eq!(bin_index(&edges, 0.5), 4);
        assert_eq!(bin_index(&edges, 0.0), 0);
    }

    #[test]
    fn ties_count_as_correct() {
        let p = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let r = ece(&p, &[1], 15).unwrap();
        assert_eq!(r.bins[7].accuracy, 1.0);
        assert_eq!(r.ece, 0.5);
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
        let n = rng.random_range(1..60);
        let k = rng.random_range(2..6);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let sharp = rng.random_range(0.1..8.0);
            let w: Vec<f64> = (0..k).map(|_| (rng.random::<f64>() * sharp).exp()).collect();
            let s: f64 = w.iter().sum();
            rows.push(w.iter().map(|v| v / s).collect::<Vec<_>>());
        }
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (p, y) = random_instance(&mut rng);
            let m = rng.random_range(1..30);
            let r = ece(&p, &y, m).unwrap();
            assert!((r.ece - brute_force_ece(&p, &y, m)).abs() <= 1e-12);
            assert_eq!(r.ece, r.ece_from_bins());
            assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), y.len());
            assert!((0.0..=1.0).contains(&r.ece) && r.nll >= 0.0);
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (p, y) = random_instance(&mut rng);
            let mut idx: Vec<usize> = (0..y.len()).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let q = p.select_rows(&idx);
            let z: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let a = ece(&p, &y, 15).unwrap().ece;
            let b = ece(&q, &z, 15).unwrap().ece;
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn recalibration_fixpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3000;
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.7..1.0)).collect();
        // labels drawn with a miscalibrated hit rate
        let labels: Vec<usize> = conf
            .iter()
            .map(|&c| usize::from(rng.random::<f64>() >= c * c))
            .collect();
        let before = ece(&binary(&conf), &labels, 15).unwrap();
        assert!(before.ece > 0.05);
        let edges = bin_edges(15);
        let refined: Vec<f64> = conf
            .iter()
            .map(|&c| {
                let acc = before.bins[bin_index(&edges, c)].accuracy;
                assert!(acc > 0.5);
                acc
            })
            .collect();
        let after = ece(&binary(&refined), &labels, 15).unwrap();
        assert!(after.ece <= 1e-12, "{}", after.ece);
    }

    #[test]
    fn reliability_curve_examples() {
        // constant 0.9 confidence, 60% correct
        let p = binary(&[0.9; 10]);
        let y = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let r = ece(&p, &y, 15).unwrap();
        let curve = reliability_curve(&r);
        assert_eq!(curve.points.len(), 1);
        assert!((curve.points[0].confidence - 0.9).abs() < 1e-12);
        assert_eq!(curve.points[0].accuracy, 0.6);

        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,count,confidence,accuracy\n"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn calibrated_predictor_lies_on_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 20000;
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let labels: Vec<usize> = conf.iter().map(|&c| usize::from(rng.random::<f64>() >= c)).collect();
        let r = ece(&binary(&conf), &labels, 15).unwrap();
        for p in reliability_curve(&r).points {
            let bound = 3.0 / (p.count as f64).sqrt();
            assert!((p.accuracy - p.confidence).abs() <= bound, "{p:?}");
        }
    }

    #[test]
    fn json_round_trip() {
        let p = binary(&[0.9, 0.55, 0.7]);
        let r = ece(&p, &[0, 1, 0], 15).unwrap();
        let back: CalibrationReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
