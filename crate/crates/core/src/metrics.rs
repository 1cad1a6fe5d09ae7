//! Accuracy, predictive entropy and binned expected calibration error.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_ECE_BINS: usize = 15;

/// Predictive entropy (nats) of one pool sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyScore {
    pub id: usize,
    pub entropy: f64,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `−Σ p ln p` with `0·ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// One score per row of a B×K probability matrix; ids are row indices.
pub fn predictive_entropy(probs: &Tensor) -> Vec<EntropyScore> {
    (0..probs.rows())
        .map(|id| EntropyScore {
            id,
            entropy: entropy(probs.row(id)).max(0.0),
        })
        .collect()
}

fn check_inputs(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.ndim() != 2 {
        return Err(Error::dim(format!("expected B×K probabilities, got {:?}", probs.shape())));
    }
    if probs.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty prediction set"));
    }
    check_inputs(probs, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-width reliability bins over `(0, 1]` and the ECE they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub num_bins: usize,
    pub total: usize,
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

/// Bin `m` covers `(m/M, (m+1)/M]`; a confidence of exactly 0 goes to bin 0.
pub fn bin_index(conf: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut idx = ((conf * m).ceil() as isize - 1).clamp(0, num_bins as isize - 1) as usize;
    // the product can round across a boundary; settle against the quotients
    while idx > 0 && conf <= idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < num_bins && conf > (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

impl ReliabilityReport {
    /// `Σ_m (n_m/N)·|acc_m − conf_m|` from the stored bins.
    pub fn recompute_ece(&self) -> f64 {
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / self.total as f64 * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }

    pub const CSV_HEADER: &'static str = "bin,lo,hi,count,mean_confidence,accuracy,gap";

    /// One row per bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (i, b) in self.bins.iter().enumerate() {
            let gap = if b.count > 0 { (b.accuracy - b.mean_confidence).abs() } else { 0.0 };
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{}",
                b.lo, b.hi, b.count, b.mean_confidence, b.accuracy, gap
            );
        }
        s
    }

    /// Parses [`to_csv`](Self::to_csv) output and recomputes the ECE.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Data("reliability CSV header mismatch".into()));
        }
        let mut bins = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Data(format!("bad reliability row: {line}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("{s}: {e}")));
            bins.push(ReliabilityBin {
                lo: num(f[1])?,
                hi: num(f[2])?,
                count: f[3].parse().map_err(|e| Error::Data(format!("{}: {e}", f[3])))?,
                mean_confidence: num(f[4])?,
                accuracy: num(f[5])?,
            });
        }
        let total = bins.iter().map(|b| b.count).sum();
        let mut report = ReliabilityReport {
            num_bins: bins.len(),
            total,
            bins,
            ece: 0.0,
        };
        report.ece = report.recompute_ece();
        Ok(report)
    }
}

/// Confidence is the max class probability, the prediction its argmax.
pub fn compute_ece(probs: &Tensor, labels: &[usize], num_bins: usize) -> Result<ReliabilityReport> {
    if num_bins == 0 {
        return Err(Error::config("ECE needs at least one bin"));
    }
    if labels.is_empty() {
        return Err(Error::contract("ECE of an empty prediction set"));
    }
    check_inputs(probs, labels)?;
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let conf = row[pred];
        let m = bin_index(conf, num_bins);
        count[m] += 1;
        conf_sum[m] += conf;
        if pred == y {
            hits[m] += 1;
        }
    }
    let bins = (0..num_bins)
        .map(|m| {
            let n = count[m];
            let (mean_confidence, accuracy) = if n > 0 {
                (conf_sum[m] / n as f64, hits[m] as f64 / n as f64)
            } else {
                (0.0, 0.0)
            };
            ReliabilityBin {
                lo: m as f64 / num_bins as f64,
                hi: (m + 1) as f64 / num_bins as f64,
                count: n,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    let mut report = ReliabilityReport {
        num_bins,
        total: labels.len(),
        bins,
        ece: 0.0,
    };
    report.ece = report.recompute_ece();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let uniform = probs(&[vec![0.1; 10]]);
        assert!((predictive_entropy(&uniform)[0].entropy - 10f64.ln()).abs() < 1e-12);
        let onehot = probs(&[vec![0.0, 1.0, 0.0]]);
        assert_eq!(predictive_entropy(&onehot)[0].entropy, 0.0);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1)
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        let got = entropy(&[0.7, 0.2, 0.1]);
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn entropy_permutation_invariant() {
        let a = entropy(&[0.5, 0.3, 0.15, 0.05]);
        let b = entropy(&[0.05, 0.5, 0.15, 0.3]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn ece_examples() {
        let p = probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(compute_ece(&p, &[0, 1], 15).unwrap().ece, 0.0);

        let p = probs(&[vec![0.9, 0.1], vec![0.9, 0.1]]);
        let r = compute_ece(&p, &[0, 1], 1).unwrap();
        assert!((r.ece - 0.4).abs() < 1e-12);
        assert_eq!(r.bins[0].count, 2);
    }

    #[test]
    fn ece_empty_is_contract_error() {
        let p = Tensor::zeros(vec![1, 2]);
        assert!(matches!(compute_ece(&p, &[], 15), Err(Error::Contract(_))));
    }

    #[test]
    fn bin_boundaries_are_right_closed() {
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.6, 15), 8); // 9/15 == 0.6 closes bin 8
        assert_eq!(bin_index(0.5, 2), 0);
        assert_eq!(bin_index(0.5000001, 2), 1);
    }

    #[test]
    fn accuracy_examples() {
        let p = probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 0]).unwrap(), 0.0);
        // ties resolve to the lowest class
        let tie = probs(&[vec![0.5, 0.5]]);
        assert_eq!(accuracy(&tie, &[0]).unwrap(), 1.0);
    }

    #[test]
    fn random_predictor_accuracy_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let mut data = Vec::with_capacity(n * 10);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
            labels.push(rng.random_range(0..10));
        }
        let p = Tensor::new(vec![n, 10], data).unwrap();
        let acc = accuracy(&p, &labels).unwrap();
        assert!((acc - 0.1).abs() < 0.01, "{acc}");
    }

    #[test]
    fn csv_round_trip_preserves_ece() {
        let p = probs(&[vec![0.8, 0.2], vec![0.6, 0.4], vec![0.3, 0.7]]);
        let r = compute_ece(&p, &[0, 1, 1], 5).unwrap();
        let back = ReliabilityReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.total, 3);
        assert!((back.ece - r.ece).abs() < 1e-12);
    }
}
