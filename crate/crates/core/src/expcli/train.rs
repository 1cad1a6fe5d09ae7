//! `train` and `pretrain-target`: one run into its own directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::*;
use crate::data::prepare_data;
use crate::error::{Error, Result};
use crate::models::save_checkpoint;
use crate::prioritization::SelectionRecord;
use crate::trainer::{run_experiment, EpochReport, EpochTiming, RunArtifacts, RunConfig, RunObserver};

/// Headline numbers of a finished run, written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub run_id: String,
    pub method: String,
    pub hyperparameter: Option<f64>,
    pub fraction: f64,
    pub criterion: String,
    pub guided: bool,
    pub epochs: usize,
    pub ece_bins: usize,
    pub test_accuracy: f64,
    pub test_ece: f64,
    pub final_val_accuracy: f64,
    pub final_val_ece: f64,
    pub scoring_passes: usize,
    /// Mean training seconds of full-pool and subset epochs, excluding
    /// scoring and evaluation.
    pub mean_full_epoch_seconds: Option<f64>,
    pub mean_subset_epoch_seconds: Option<f64>,
}

/// Streams per-epoch rows to disk so an aborted run leaves partial files.
struct FileObserver {
    epochs: csv::Writer<File>,
    timing: csv::Writer<File>,
    selections: BufWriter<File>,
}

impl FileObserver {
    fn create(dir: &Path) -> Result<Self> {
        Ok(FileObserver {
            epochs: csv::Writer::from_path(dir.join(EPOCHS_FILE))?,
            timing: csv::Writer::from_path(dir.join(TIMING_FILE))?,
            selections: BufWriter::new(File::create(dir.join(SELECTIONS_FILE))?),
        })
    }
}

impl RunObserver for FileObserver {
    fn on_epoch(&mut self, report: &EpochReport, selection: &SelectionRecord, timing: &EpochTiming) -> Result<()> {
        self.epochs.serialize(report)?;
        self.epochs.flush()?;
        self.timing.serialize(timing)?;
        self.timing.flush()?;
        serde_json::to_writer(&mut self.selections, selection)?;
        self.selections.write_all(b"\n")?;
        self.selections.flush()?;
        Ok(())
    }
}

pub fn mean_epoch_seconds(timings: &[EpochTiming], pool_size: usize) -> (Option<f64>, Option<f64>) {
    let mean = |full: bool| {
        let v: Vec<f64> = timings
            .iter()
            .filter(|t| (t.subset_size == pool_size) == full)
            .map(|t| t.train_seconds)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(true), mean(false))
}

fn final_report(run_id: &str, config: &RunConfig, a: &RunArtifacts, pool_size: usize) -> FinalReport {
    let last = a.epochs.last();
    let (full, sub) = mean_epoch_seconds(&a.timings, pool_size);
    FinalReport {
        run_id: run_id.to_string(),
        method: a.meta.calibration.method_name().to_string(),
        hyperparameter: a.meta.calibration.hyperparameter(),
        fraction: config.subset.fraction,
        criterion: serde_json::to_value(config.criterion)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        guided: config.target.is_some(),
        epochs: config.epochs,
        ece_bins: config.ece_bins,
        test_accuracy: a.test_accuracy,
        test_ece: a.test_report.ece,
        final_val_accuracy: last.map_or(f64::NAN, |e| e.val_accuracy),
        final_val_ece: last.map_or(f64::NAN, |e| e.val_ece),
        scoring_passes: a.scoring_passes,
        mean_full_epoch_seconds: full,
        mean_subset_epoch_seconds: sub,
    }
}

/// Result of a completed `train`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub manifest: ExperimentManifest,
    pub report: FinalReport,
    pub artifacts: RunArtifacts,
}

/// Resolves the run directory: explicit argument, then `config.output_dir`,
/// then `runs/<run id>`.
pub fn run_dir(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    Ok(match (out, &config.output_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.clone(),
        (None, None) => PathBuf::from("runs").join(run_id(config)?),
    })
}

/// Runs `config` and writes the manifest, epoch CSV, selection JSONL, timing
/// CSV, test reliability CSV, final report and checkpoint into `dir`.
/// On failure the manifest is left marked incomplete with the error.
pub fn cmd_train(config: &RunConfig, dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let id = run_id(config)?;
    let mut manifest = ExperimentManifest::new(id.clone(), config.clone());
    for (k, f) in [("epochs", EPOCHS_FILE), ("selections", SELECTIONS_FILE), ("timing", TIMING_FILE)] {
        manifest.artifacts.insert(k.into(), f.into());
    }
    manifest.write(dir)?;

    let result = (|| -> Result<_> {
        let data = prepare_data(&config.dataset, config.train_fraction, config.seeds.split)?;
        manifest.normalization = Some(data.norm.clone());
        let mut observer = FileObserver::create(dir)?;
        let artifacts = run_experiment(config, &data, &mut observer)?;
        fs::write(dir.join(RELIABILITY_FILE), artifacts.test_report.to_csv())?;
        save_checkpoint(&artifacts.model, &artifacts.meta, &dir.join(CHECKPOINT_FILE))?;
        let report = final_report(&id, config, &artifacts, data.train.len());
        fs::write(dir.join(FINAL_REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok((artifacts, report))
    })();

    manifest.finished_unix = Some(unix_now());
    match result {
        Ok((artifacts, report)) => {
            for (k, f) in [
                ("reliability", RELIABILITY_FILE),
                ("final_report", FINAL_REPORT_FILE),
                ("checkpoint", CHECKPOINT_FILE),
            ] {
                manifest.artifacts.insert(k.into(), f.into());
            }
            manifest.warnings = artifacts.warnings.clone();
            manifest.status = RunStatus::Complete;
            manifest.write(dir)?;
            Ok(TrainOutcome {
                dir: dir.to_path_buf(),
                manifest,
                report,
                artifacts,
            })
        }
        Err(e) => {
            manifest.status = RunStatus::Incomplete;
            manifest.error = Some(e.to_string());
            manifest.write(dir)?;
            Err(e)
        }
    }
}

/// Trains a target model with the same trainer on the full pool, without
/// subset selection or guidance; the checkpoint lands in `dir/model.ckpt`.
pub fn cmd_pretrain_target(config: &RunConfig, dir: &Path) -> Result<TrainOutcome> {
    let mut target = config.clone();
    target.subset.fraction = 1.0;
    target.target = None;
    target.per_subset = None;
    cmd_train(&target, dir)
}

/// Checks that a completed run references only files that exist.
pub fn verify_run(dir: &Path) -> Result<ExperimentManifest> {
    let m = ExperimentManifest::read(dir)?;
    let missing = m.missing_artifacts(dir);
    if m.status == RunStatus::Complete && !missing.is_empty() {
        return Err(Error::Data(format!("{}: missing artifacts {missing:?}", dir.display())));
    }
    Ok(m)
}
