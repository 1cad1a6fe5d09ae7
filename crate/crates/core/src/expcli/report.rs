//! `report`: plot-ready CSVs derived from a run directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use super::manifest::*;
use crate::error::{Error, Result};
use crate::metrics::ReliabilityReport;
use crate::prioritization::{balance_ratio, SelectionRecord};
use crate::trainer::EpochReport;

pub const REPORT_DIR: &str = "report";
pub const CLASS_DISTRIBUTION_FILE: &str = "class_distribution.csv";
pub const OVERLAP_FILE: &str = "overlap.csv";
pub const VAL_CURVE_FILE: &str = "val_accuracy.csv";
pub const RELIABILITY_CHECK_FILE: &str = "reliability_check.csv";

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub complete: bool,
    /// Mean of max/min class counts over post-warm-up epochs.
    pub mean_balance_ratio: Option<f64>,
    /// Mean consecutive-epoch overlap over post-warm-up epochs after the
    /// first one.
    pub mean_overlap: Option<f64>,
    /// ECE re-summed from the stored bins next to the value reported.
    pub ece_check: Option<(f64, f64)>,
}

pub fn read_selections(path: &Path) -> Result<Vec<SelectionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

pub fn read_epochs(path: &Path) -> Result<Vec<EpochReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Writes the report bundle into `run/report/`. An incomplete run or a
/// missing artifact yields a partial bundle and a warning, not an error.
pub fn cmd_report(run: &Path) -> Result<ReportBundle> {
    let manifest = ExperimentManifest::read(run)?;
    let out = run.join(REPORT_DIR);
    fs::create_dir_all(&out)?;
    let mut bundle = ReportBundle {
        dir: out.clone(),
        files: Vec::new(),
        warnings: Vec::new(),
        complete: manifest.status == RunStatus::Complete,
        mean_balance_ratio: None,
        mean_overlap: None,
        ece_check: None,
    };
    if !bundle.complete {
        bundle.warnings.push(format!(
            "run {} is {:?}; report is partial",
            manifest.run_id, manifest.status
        ));
    }
    let warmup = manifest.config.subset.warmup_epochs;
    let k = manifest.config.model.num_classes;

    match read_selections(&run.join(SELECTIONS_FILE)) {
        Ok(selections) => {
            let path = out.join(CLASS_DISTRIBUTION_FILE);
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["epoch".to_string(), "subset_size".to_string()];
            header.extend((0..k).map(|c| format!("class_{c}")));
            header.push("balance_ratio".into());
            w.write_record(&header)?;
            for s in &selections {
                let mut row = vec![s.epoch.to_string(), s.ids.len().to_string()];
                row.extend(s.histogram.iter().map(|c| c.to_string()));
                row.push(balance_ratio(&s.histogram).to_string());
                w.write_record(&row)?;
            }
            w.flush()?;
            bundle.files.push(path);

            let path = out.join(OVERLAP_FILE);
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["epoch", "overlap"])?;
            for s in &selections {
                w.write_record([s.epoch.to_string(), s.overlap.map_or(String::new(), |o| o.to_string())])?;
            }
            w.flush()?;
            bundle.files.push(path);

            let post: Vec<&SelectionRecord> = selections.iter().filter(|s| s.epoch > warmup).collect();
            bundle.mean_balance_ratio = mean(post.iter().map(|s| balance_ratio(&s.histogram)));
            bundle.mean_overlap = mean(post.iter().skip(1).filter_map(|s| s.overlap));
        }
        Err(e) => bundle.warnings.push(format!("selections unavailable: {e}")),
    }

    match read_epochs(&run.join(EPOCHS_FILE)) {
        Ok(epochs) => {
            let path = out.join(VAL_CURVE_FILE);
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["epoch", "val_accuracy", "val_ece"])?;
            for e in &epochs {
                w.write_record([e.epoch.to_string(), e.val_accuracy.to_string(), e.val_ece.to_string()])?;
            }
            w.flush()?;
            bundle.files.push(path);
        }
        Err(e) => bundle.warnings.push(format!("epoch log unavailable: {e}")),
    }

    let reliability = fs::read_to_string(run.join(RELIABILITY_FILE))
        .map_err(Error::from)
        .and_then(|t| ReliabilityReport::from_csv(&t));
    match reliability {
        Ok(rel) => {
            let reported = fs::read_to_string(run.join(FINAL_REPORT_FILE))
                .ok()
                .and_then(|t| serde_json::from_str::<super::train::FinalReport>(&t).ok())
                .map(|r| r.test_ece);
            let resummed = rel.ece;
            let path = out.join(RELIABILITY_FILE);
            fs::write(&path, rel.to_csv())?;
            bundle.files.push(path);
            if let Some(reported) = reported {
                let path = out.join(RELIABILITY_CHECK_FILE);
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["ece_from_bins", "ece_reported", "abs_diff"])?;
                w.write_record([resummed.to_string(), reported.to_string(), (resummed - reported).abs().to_string()])?;
                w.flush()?;
                bundle.files.push(path);
                bundle.ece_check = Some((resummed, reported));
            }
        }
        Err(e) => bundle.warnings.push(format!("reliability bins unavailable: {e}")),
    }

    for w in &bundle.warnings {
        log::warn!("{w}");
    }
    Ok(bundle)
}
