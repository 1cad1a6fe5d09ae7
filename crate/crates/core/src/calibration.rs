//! In-training calibration: label smoothing, mixup and focal loss, plus the
//! plain cross-entropy baseline.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::models::Model;
use crate::numerics::{Tape, Tensor, Var, PROB_FLOOR};
use crate::rng::Rng;

/// Sweep grids used for hyperparameter searches.
pub const LABEL_SMOOTHING_GRID: [f64; 5] = [0.01, 0.03, 0.05, 0.07, 0.09];
pub const MIXUP_GRID: [f64; 6] = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35];
pub const FOCAL_GRID: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

/// Subset fractions in the column order of a "a/b/c/d" hyperparameter row.
pub const TABLE_FRACTIONS: [f64; 4] = [1.0, 0.3, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibrationConfig {
    None,
    LabelSmoothing { alpha: f64 },
    Mixup { alpha: f64 },
    Focal { gamma: f64 },
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig::None
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CalibrationConfig::None => Ok(()),
            CalibrationConfig::LabelSmoothing { alpha } if !(0.0..1.0).contains(&alpha) => Err(
                Error::config(format!("label_smoothing alpha must be in [0, 1), got {alpha}")),
            ),
            CalibrationConfig::Mixup { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::config(format!("mixup alpha must be > 0, got {alpha}")))
            }
            CalibrationConfig::Focal { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                Err(Error::config(format!("focal gamma must be ≥ 0, got {gamma}")))
            }
            _ => Ok(()),
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            CalibrationConfig::None => "none",
            CalibrationConfig::LabelSmoothing { .. } => "label_smoothing",
            CalibrationConfig::Mixup { .. } => "mixup",
            CalibrationConfig::Focal { .. } => "focal",
        }
    }

    /// The active method's hyperparameter (α or γ), if any.
    pub fn hyperparameter(&self) -> Option<f64> {
        match *self {
            CalibrationConfig::None => None,
            CalibrationConfig::LabelSmoothing { alpha } | CalibrationConfig::Mixup { alpha } => Some(alpha),
            CalibrationConfig::Focal { gamma } => Some(gamma),
        }
    }

    /// Same method with a different hyperparameter.
    pub fn with_hyperparameter(&self, value: f64) -> Self {
        match self {
            CalibrationConfig::None => CalibrationConfig::None,
            CalibrationConfig::LabelSmoothing { .. } => CalibrationConfig::LabelSmoothing { alpha: value },
            CalibrationConfig::Mixup { .. } => CalibrationConfig::Mixup { alpha: value },
            CalibrationConfig::Focal { .. } => CalibrationConfig::Focal { gamma: value },
        }
    }
}

/// Parses a per-subset hyperparameter row such as `"1/3/3/3"` into
/// `(fraction, value)` pairs for fractions 1.0, 0.3, 0.2, 0.1.
pub fn parse_table_row(row: &str) -> Result<Vec<(f64, f64)>> {
    let values: Vec<f64> = row
        .split('/')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::config(format!("bad hyperparameter row {row:?}: {e}")))?;
    if values.len() != TABLE_FRACTIONS.len() {
        return Err(Error::config(format!(
            "hyperparameter row {row:?} needs {} entries",
            TABLE_FRACTIONS.len()
        )));
    }
    Ok(TABLE_FRACTIONS.iter().copied().zip(values).collect())
}

/// Picks the hyperparameter for `fraction` from a table row.
pub fn resolve_for_fraction(base: &CalibrationConfig, row: &str, fraction: f64) -> Result<CalibrationConfig> {
    let entries = parse_table_row(row)?;
    let (_, value) = entries
        .iter()
        .find(|(f, _)| (f - fraction).abs() < 1e-9)
        .ok_or_else(|| Error::config(format!("no hyperparameter for subset fraction {fraction} in {row:?}")))?;
    let cfg = base.with_hyperparameter(*value);
    cfg.validate()?;
    Ok(cfg)
}

/// Row-stochastic B×K target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution(Tensor);

impl LabelDistribution {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 || t.shape()[1] < 2 {
            return Err(Error::dim(format!("label distribution must be B×K, got {:?}", t.shape())));
        }
        for i in 0..t.rows() {
            let row = t.row(i);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Data(format!("row {i} is not a probability vector")));
            }
        }
        Ok(LabelDistribution(t))
    }

    pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::contract("empty label set"));
        }
        let mut data = vec![0.0; labels.len() * num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
            }
            data[i * num_classes + y] = 1.0;
        }
        Ok(LabelDistribution(Tensor::new(vec![labels.len(), num_classes], data)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    /// Index of the single 1 in each row, if every row is one-hot.
    pub fn hard_labels(&self) -> Option<Vec<usize>> {
        (0..self.rows())
            .map(|i| {
                let row = self.0.row(i);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                (ones == 1 && ones + zeros == row.len()).then(|| argmax(row))
            })
            .collect()
    }

    /// `λ·a + (1−λ)·b`.
    pub fn mix(a: &Self, b: &Self, lambda: f64) -> Result<Self> {
        if a.0.shape() != b.0.shape() {
            return Err(Error::dim("mixed label distributions differ in shape"));
        }
        let data = a.0.data().iter().zip(b.0.data()).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        Ok(LabelDistribution(Tensor::new(a.0.shape().to_vec(), data)?))
    }
}

/// `y·(1−α) + α/K` applied to one-hot rows.
pub fn smooth_labels(onehot: &LabelDistribution, alpha: f64, num_classes: usize) -> Result<LabelDistribution> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!("label smoothing alpha must be in [0, 1), got {alpha}")));
    }
    if num_classes < 2 || onehot.num_classes() != num_classes {
        return Err(Error::dim(format!(
            "label distribution has {} classes, expected {num_classes}",
            onehot.num_classes()
        )));
    }
    if onehot.hard_labels().is_none() {
        return Err(Error::contract("smooth_labels expects one-hot rows"));
    }
    let k = num_classes as f64;
    let data = onehot.0.data().iter().map(|&y| y * (1.0 - alpha) + alpha / k).collect();
    Ok(LabelDistribution(Tensor::new(onehot.0.shape().to_vec(), data)?))
}

/// A mixup batch: `x̄ = λ·x_i + (1−λ)·x_j` where `j = permutation[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub partner_labels: Vec<usize>,
    pub lambda: f64,
    pub permutation: Vec<usize>,
    /// Set when the batch was too small to mix and was passed through.
    pub unmixed: bool,
}

impl MixedBatch {
    /// `ȳ = λ·y_i + (1−λ)·y_j`.
    pub fn mixed_labels(&self, num_classes: usize) -> Result<LabelDistribution> {
        LabelDistribution::mix(
            &LabelDistribution::one_hot(&self.labels, num_classes)?,
            &LabelDistribution::one_hot(&self.partner_labels, num_classes)?,
            self.lambda,
        )
    }
}

/// Mixes a batch with an explicit coefficient and pairing.
pub fn mixup_with(inputs: &Tensor, labels: &[usize], lambda: f64, permutation: Vec<usize>) -> Result<MixedBatch> {
    let b = inputs.rows();
    if labels.len() != b || permutation.len() != b {
        return Err(Error::dim(format!(
            "mixup: batch {b}, {} labels, permutation of {}",
            labels.len(),
            permutation.len()
        )));
    }
    let mut seen = vec![false; b];
    for &j in &permutation {
        if j >= b || std::mem::replace(&mut seen[j], true) {
            return Err(Error::contract("mixup pairing is not a permutation"));
        }
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    let w = inputs.row_len();
    let mut data = Vec::with_capacity(inputs.len());
    for (i, &j) in permutation.iter().enumerate() {
        let (xi, xj) = (inputs.row(i), inputs.row(j));
        data.extend(xi.iter().zip(xj).map(|(a, c)| lambda * a + (1.0 - lambda) * c));
    }
    debug_assert_eq!(data.len(), b * w);
    Ok(MixedBatch {
        inputs: Tensor::new(inputs.shape().to_vec(), data)?,
        labels: labels.to_vec(),
        partner_labels: permutation.iter().map(|&j| labels[j]).collect(),
        lambda,
        permutation,
        unmixed: false,
    })
}

/// One `λ ~ Beta(α, α)` per batch, partners from a uniform random permutation.
/// A single-sample batch is passed through with `λ = 1` and `unmixed` set.
pub fn mixup_batch(inputs: &Tensor, labels: &[usize], alpha: f64, rng: &mut Rng) -> Result<MixedBatch> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("mixup alpha must be > 0, got {alpha}")));
    }
    if inputs.rows() < 2 {
        let mut batch = mixup_with(inputs, labels, 1.0, vec![0])?;
        batch.unmixed = true;
        log::warn!("mixup on a batch of one sample; passing it through unmixed");
        return Ok(batch);
    }
    let lambda = sample_lambda(alpha, rng)?;
    let mut perm: Vec<usize> = (0..inputs.rows()).collect();
    perm.shuffle(rng);
    mixup_with(inputs, labels, lambda, perm)
}

pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

fn check_probs(probs: &Tensor, targets: &LabelDistribution) -> Result<()> {
    if probs.shape() != targets.tensor().shape() {
        return Err(Error::dim(format!(
            "probabilities {:?} vs targets {:?}",
            probs.shape(),
            targets.tensor().shape()
        )));
    }
    Ok(())
}

/// Mean over the batch of `−Σ_k t_k · log p_k`, with `p` clamped at 1e-12.
pub fn cross_entropy(probs: &Tensor, targets: &LabelDistribution) -> Result<f64> {
    check_probs(probs, targets)?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.tensor().data())
        .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * p.max(PROB_FLOOR).ln() })
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Mean over the batch of `−(1−p)^γ · log p`, `p` the true-class probability.
pub fn focal_loss(probs: &Tensor, targets: &LabelDistribution, gamma: f64) -> Result<f64> {
    check_probs(probs, targets)?;
    let labels = targets
        .hard_labels()
        .ok_or_else(|| Error::contract("focal loss expects one-hot targets"))?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let p = probs.row(i)[c];
            -(1.0 - p).max(0.0).powf(gamma) * p.max(PROB_FLOOR).ln()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// A recorded training loss ready for the backward pass.
#[derive(Debug)]
pub struct LossRecord {
    pub tape: Tape,
    pub loss: Var,
    pub params: Vec<Var>,
    /// Mixup coefficient, when mixup was applied.
    pub lambda: Option<f64>,
}

impl LossRecord {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }
}

/// Records the configured loss on `model` for one batch.
///
/// `none` → CE on one-hot labels; `label_smoothing` → CE on smoothed labels;
/// `mixup` → `λ·CE(y_i) + (1−λ)·CE(y_j)` on mixed inputs; `focal` → focal loss.
pub fn training_loss(
    config: &CalibrationConfig,
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<LossRecord> {
    config.validate()?;
    if let CalibrationConfig::Mixup { alpha } = *config {
        let mixed = mixup_batch(inputs, labels, alpha, rng)?;
        return mixup_loss(model, &mixed);
    }
    let k = model.config().num_classes;
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone());
    let (logits, params) = model.forward(&mut tape, x, true)?;
    let loss = match *config {
        CalibrationConfig::None => {
            let t = LabelDistribution::one_hot(labels, k)?;
            tape.cross_entropy(logits, t.tensor())?
        }
        CalibrationConfig::LabelSmoothing { alpha } => {
            let t = smooth_labels(&LabelDistribution::one_hot(labels, k)?, alpha, k)?;
            tape.cross_entropy(logits, t.tensor())?
        }
        CalibrationConfig::Focal { gamma } => tape.focal(logits, labels, gamma)?,
        CalibrationConfig::Mixup { .. } => unreachable!(),
    };
    Ok(LossRecord {
        tape,
        loss,
        params,
        lambda: None,
    })
}

/// Convex combination of the two cross-entropies on a mixed batch.
pub fn mixup_loss(model: &Model, mixed: &MixedBatch) -> Result<LossRecord> {
    let k = model.config().num_classes;
    let mut tape = Tape::new();
    let x = tape.constant(mixed.inputs.clone());
    let (logits, params) = model.forward(&mut tape, x, true)?;
    let ya = LabelDistribution::one_hot(&mixed.labels, k)?;
    let yb = LabelDistribution::one_hot(&mixed.partner_labels, k)?;
    let la = tape.cross_entropy(logits, ya.tensor())?;
    let lb = tape.cross_entropy(logits, yb.tensor())?;
    let loss = tape.lincomb(la, mixed.lambda, lb, 1.0 - mixed.lambda)?;
    Ok(LossRecord {
        tape,
        loss,
        params,
        lambda: Some(mixed.lambda),
    })
}
