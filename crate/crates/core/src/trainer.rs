//! SGD with momentum and L2 weight decay under a cosine schedule, and the
//! warm-up-then-subset training protocol built on it.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::calibration::{resolve_for_fraction, training_loss, CalibrationConfig};
use crate::data::{DatasetSpec, PreparedData, Dataset};
use crate::error::{Error, Result};
use crate::guidance::{prepare_target, RecomputePolicy, TargetGuide};
use crate::metrics::{accuracy, compute_ece, ReliabilityReport, DEFAULT_ECE_BINS};
use crate::models::{Model, ModelConfig, TrainingMeta};
use crate::numerics::Tensor;
use crate::prioritization::{epoch_subset, score_pool, Criterion, SelectionRecord, SelectionSource, SubsetSchedule};
use crate::rng::{self, Rng, Stream};

/// `η_min + ½(η₀ − η_min)(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("cosine schedule over zero epochs"));
    }
    if t > total {
        return Err(Error::contract(format!("epoch index {t} past schedule end {total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_min: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            lr_min: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("optimizer.lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("optimizer.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("optimizer.weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::config(format!("optimizer.lr_min must be in [0, lr], got {}", self.lr_min)));
        }
        Ok(())
    }
}

/// Momentum buffers plus the fixed hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            lr0: config.lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }
}

/// `g ← grad + w·p; v ← μ·v + g; p ← p − η·v`, per parameter tensor.
/// Nothing is updated if any gradient is non-finite.
pub fn sgd_step(state: &mut OptimizerState, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::dim("parameter, gradient and velocity counts differ"));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::dim(format!("parameter {i}: shapes differ")));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} entry {j} is {}", g[j])));
        }
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            let d = gi + wd * *pi;
            *vi = mu * *vi + d;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub samples: usize,
    pub seconds: f64,
}

/// One pass over `ids` in shuffled mini-batches.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    pool: &Dataset,
    ids: &[usize],
    calibration: &CalibrationConfig,
    optimizer: &mut OptimizerState,
    lr: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if ids.is_empty() {
        return Err(Error::contract("empty training subset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be ≥ 1"));
    }
    let start = Instant::now();
    let mut order = ids.to_vec();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size) {
        let (x, y) = pool.batch(chunk);
        let rec = training_loss(calibration, model, &x, &y, rng)?;
        let loss = rec.value();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} in batch {batches}")));
        }
        let grads = rec.tape.backward(rec.loss)?;
        let g: Vec<Vec<f64>> = rec.params.iter().map(|&v| grads.wrt(v)).collect();
        let mut flat: Vec<Vec<f64>> = model.params().iter().map(|p| p.data().to_vec()).collect();
        sgd_step(optimizer, &mut flat, &g, lr)
            .map_err(|e| Error::NonFinite(format!("batch {batches}: {e}")))?;
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let new = flat
            .into_iter()
            .zip(shapes)
            .map(|(d, s)| Tensor::new(s, d))
            .collect::<Result<Vec<_>>>()?;
        model.set_params(new)?;
        loss_sum += loss * chunk.len() as f64;
        batches += 1;
    }
    Ok(EpochStats {
        mean_loss: loss_sum / ids.len() as f64,
        batches,
        samples: ids.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Class posteriors for a whole dataset, in id order.
pub fn predict_dataset(model: &Model, ds: &Dataset, batch_size: usize) -> Result<Tensor> {
    let ids: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::with_capacity(ds.len() * model.config().num_classes);
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, _) = ds.batch(chunk);
        data.extend(model.predict_proba(&x)?.into_data());
    }
    Tensor::new(vec![ds.len(), model.config().num_classes], data)
}

/// Accuracy and reliability bins of `model` on `ds`.
pub fn evaluate(model: &Model, ds: &Dataset, num_bins: usize, batch_size: usize) -> Result<(f64, ReliabilityReport)> {
    let probs = predict_dataset(model, ds, batch_size)?;
    Ok((accuracy(&probs, ds.labels())?, compute_ece(&probs, ds.labels(), num_bins)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    #[serde(default = "defaults::warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "defaults::fraction")]
    pub fraction: f64,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        SubsetConfig {
            warmup_epochs: defaults::warmup(),
            fraction: defaults::fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub policy: RecomputePolicy,
}

/// Named seeds; every random stream in a run derives from one of these.
/// Model initialization uses `model.seed`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub split: u64,
    /// Batch shuffling, mixup and random selection.
    #[serde(default)]
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub dataset: DatasetSpec,
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    pub model: ModelConfig,
    #[serde(default)]
    pub target: Option<TargetConfig>,
    pub calibration: CalibrationConfig,
    /// Per-subset hyperparameter row "a/b/c/d" for fractions 1.0/0.3/0.2/0.1;
    /// overrides the calibration hyperparameter for the configured fraction.
    #[serde(default)]
    pub per_subset: Option<String>,
    #[serde(default)]
    pub subset: SubsetConfig,
    #[serde(default = "defaults::criterion")]
    pub criterion: Criterion,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "defaults::ece_bins")]
    pub ece_bins: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "defaults::eval_batch_size")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

pub(crate) mod defaults {
    use crate::prioritization::Criterion;

    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn warmup() -> usize {
        10
    }
    pub fn fraction() -> f64 {
        1.0
    }
    pub fn epochs() -> usize {
        200
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn train_fraction() -> f64 {
        0.9
    }
    pub fn criterion() -> Criterion {
        Criterion::MaxEntropy
    }
    pub fn ece_bins() -> usize {
        crate::metrics::DEFAULT_ECE_BINS
    }
    pub fn eval_batch_size() -> usize {
        500
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be ≥ 1"));
        }
        if self.epochs < self.subset.warmup_epochs && self.subset.fraction < 1.0 {
            return Err(Error::config(format!(
                "epochs ({}) < warmup_epochs ({})",
                self.epochs, self.subset.warmup_epochs
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be ≥ 1"));
        }
        if self.ece_bins == 0 {
            return Err(Error::config("ece_bins must be ≥ 1"));
        }
        if !(self.subset.fraction > 0.0 && self.subset.fraction <= 1.0) {
            return Err(Error::config(format!("subset.fraction must be in (0, 1], got {}", self.subset.fraction)));
        }
        if self.model.num_classes != self.dataset.num_classes() {
            return Err(Error::config(format!(
                "model.num_classes ({}) != dataset classes ({})",
                self.model.num_classes,
                self.dataset.num_classes()
            )));
        }
        if self.model.input_shape != self.dataset.sample_shape() {
            return Err(Error::config(format!(
                "model.input_shape {:?} != dataset sample shape {:?}",
                self.model.input_shape,
                self.dataset.sample_shape()
            )));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.effective_calibration()?;
        Ok(())
    }

    /// Calibration after applying the per-subset hyperparameter row, if any.
    pub fn effective_calibration(&self) -> Result<CalibrationConfig> {
        self.calibration.validate()?;
        match &self.per_subset {
            Some(row) => resolve_for_fraction(&self.calibration, row, self.subset.fraction),
            None => Ok(self.calibration),
        }
    }
}

/// One row of the per-epoch curve data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_ece: f64,
    pub subset_size: usize,
    pub overlap: Option<f64>,
}

/// Wall-clock accounting for one epoch; kept apart from the deterministic
/// epoch report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub subset_size: usize,
    pub scoring_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Receives per-epoch results as they are produced.
pub trait RunObserver {
    fn on_epoch(&mut self, _report: &EpochReport, _selection: &SelectionRecord, _timing: &EpochTiming) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl RunObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub epochs: Vec<EpochReport>,
    pub selections: Vec<SelectionRecord>,
    pub timings: Vec<EpochTiming>,
    pub test_accuracy: f64,
    pub test_report: ReliabilityReport,
    pub model: Model,
    pub meta: TrainingMeta,
    /// Pool scoring passes run with the current model.
    pub scoring_passes: usize,
    pub warnings: Vec<String>,
}

/// How post-warm-up selections are scored.
pub enum Guidance {
    /// The model being trained scores the pool.
    Current,
    Target(TargetGuide),
}

/// Runs the configured protocol, loading the target checkpoint if one is set.
pub fn run_experiment(config: &RunConfig, data: &PreparedData, observer: &mut dyn RunObserver) -> Result<RunArtifacts> {
    config.validate()?;
    let guidance = match &config.target {
        Some(t) => {
            let current = config.model.param_count();
            Guidance::Target(prepare_target(&t.checkpoint, &data.train, t.policy, Some(current), config.eval_batch_size)?)
        }
        None => Guidance::Current,
    };
    run_with_guidance(config, data, guidance, observer)
}

/// Runs the protocol with an explicit guidance source; `config.target` is
/// ignored.
pub fn run_with_guidance(
    config: &RunConfig,
    data: &PreparedData,
    guidance: Guidance,
    observer: &mut dyn RunObserver,
) -> Result<RunArtifacts> {
    let model = Model::build(config.model.clone())?;
    run_from_model(config, data, model, guidance, observer)
}

/// Runs the protocol starting from the given model parameters instead of a
/// fresh initialization.
pub fn run_from_model(
    config: &RunConfig,
    data: &PreparedData,
    mut model: Model,
    mut guidance: Guidance,
    observer: &mut dyn RunObserver,
) -> Result<RunArtifacts> {
    config.validate()?;
    if model.config() != &config.model {
        return Err(Error::config("initial model does not match the configured architecture"));
    }
    let calibration = config.effective_calibration()?;
    let mut artifacts = run_on_model(config, data, &calibration, &mut model, &mut guidance, observer)?;
    if let Guidance::Target(g) = &guidance {
        artifacts.warnings.extend(g.warnings().iter().cloned());
    }
    Ok(artifacts)
}

fn run_on_model(
    config: &RunConfig,
    data: &PreparedData,
    calibration: &CalibrationConfig,
    model: &mut Model,
    guidance: &mut Guidance,
    observer: &mut dyn RunObserver,
) -> Result<RunArtifacts> {
    let pool = &data.train;
    let k = pool.num_classes();
    let schedule = SubsetSchedule::new(config.subset.warmup_epochs, config.subset.fraction, pool.len())?;
    let mut optimizer = OptimizerState::new(&config.optimizer, model)?;
    let (mut epochs, mut selections, mut timings) = (Vec::new(), Vec::new(), Vec::new());
    let mut scoring_passes = 0;
    let seed = config.seeds.train;

    for epoch in 1..=config.epochs {
        let lr = cosine_lr(epoch - 1, config.epochs, config.optimizer.lr, config.optimizer.lr_min)?;

        let score_start = Instant::now();
        let mut selection_rng = rng::derive(seed, Stream::Selection, epoch as u64);
        let scores = if schedule.needs_scores(epoch) && config.criterion == Criterion::MaxEntropy {
            Some(match guidance {
                Guidance::Current => {
                    scoring_passes += 1;
                    score_pool(model, pool, config.eval_batch_size)?
                }
                Guidance::Target(g) => g.target_scores(pool, epoch)?,
            })
        } else {
            None
        };
        let scoring_seconds = score_start.elapsed().as_secs_f64();
        let source = match (&scores, config.criterion) {
            (Some(s), _) => Some(SelectionSource::Scores(s)),
            (None, Criterion::Random) => Some(SelectionSource::Random(&mut selection_rng)),
            (None, Criterion::MaxEntropy) => None,
        };
        let selection = epoch_subset(&schedule, epoch, config.criterion, source, selections.last(), pool.labels(), k)?;

        let mut train_rng = rng::derive(seed, Stream::Shuffle, epoch as u64);
        let stats = train_epoch(
            model,
            pool,
            &selection.ids,
            calibration,
            &mut optimizer,
            lr,
            config.batch_size,
            &mut train_rng,
        )
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
            other => other,
        })?;

        let eval_start = Instant::now();
        let (val_accuracy, val_rel) = evaluate(model, &data.val, config.ece_bins, config.eval_batch_size)?;
        let report = EpochReport {
            epoch,
            lr,
            train_loss: stats.mean_loss,
            val_accuracy,
            val_ece: val_rel.ece,
            subset_size: selection.ids.len(),
            overlap: selection.overlap,
        };
        let timing = EpochTiming {
            epoch,
            subset_size: selection.ids.len(),
            scoring_seconds,
            train_seconds: stats.seconds,
            eval_seconds: eval_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: lr {lr:.5} loss {:.4} val acc {:.4} ece {:.4} subset {}",
            config.epochs,
            stats.mean_loss,
            val_accuracy,
            val_rel.ece,
            selection.ids.len()
        );
        observer.on_epoch(&report, &selection, &timing)?;
        epochs.push(report);
        selections.push(selection);
        timings.push(timing);
    }

    let (test_accuracy, test_report) = evaluate(model, &data.test, config.ece_bins, config.eval_batch_size)?;
    let last = epochs.last();
    let meta = TrainingMeta {
        epochs: config.epochs,
        calibration: *calibration,
        val_accuracy: last.map(|e| e.val_accuracy),
        val_ece: last.map(|e| e.val_ece),
        test_accuracy: Some(test_accuracy),
        test_ece: Some(test_report.ece),
    };
    Ok(RunArtifacts {
        epochs,
        selections,
        timings,
        test_accuracy,
        test_report,
        model: model.clone(),
        meta,
        scoring_passes,
        warnings: Vec::new(),
    })
}

impl RunConfig {
    /// A small synthetic configuration, handy for tests and smoke runs.
    pub fn synthetic_example(model: ModelConfig, dataset: DatasetSpec) -> Self {
        RunConfig {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            dataset,
            train_fraction: defaults::train_fraction(),
            model,
            target: None,
            calibration: CalibrationConfig::None,
            per_subset: None,
            subset: SubsetConfig::default(),
            criterion: Criterion::MaxEntropy,
            optimizer: OptimizerConfig::default(),
            ece_bins: DEFAULT_ECE_BINS,
            seeds: Seeds::default(),
            eval_batch_size: defaults::eval_batch_size(),
            output_dir: None,
        }
    }
}
