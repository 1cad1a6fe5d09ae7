//! `sweep`: Cartesian product of grid values over a base config, plus a
//! summary table regenerated from the cell manifests on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{config_from_value, config_to_value};
use super::manifest::{ExperimentManifest, RunStatus, FINAL_REPORT_FILE};
use super::train::{cmd_train, FinalReport};
use crate::calibration::TABLE_FRACTIONS;
use crate::error::{Error, Result};
use crate::trainer::RunConfig;

/// Keys a grid may vary.
pub const SWEEPABLE_KEYS: &[&str] = &[
    "calibration",
    "calibration.alpha",
    "calibration.gamma",
    "subset.fraction",
    "criterion",
    "seed",
];

pub const SWEEP_FILE: &str = "sweep.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TABLE_FILE: &str = "table.csv";

/// Grid file: a JSON object mapping sweepable keys to arrays of values.
pub type Grid = BTreeMap<String, Vec<Value>>;

pub fn parse_grid(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read grid {}: {e}", path.display())))?;
    let grid: Grid = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    validate_grid(&grid)?;
    Ok(grid)
}

pub fn validate_grid(grid: &Grid) -> Result<()> {
    for (k, vals) in grid {
        if !SWEEPABLE_KEYS.contains(&k.as_str()) {
            return Err(Error::config(format!("grid key `{k}` is not sweepable; expected one of {SWEEPABLE_KEYS:?}")));
        }
        if vals.is_empty() {
            return Err(Error::config(format!("grid key `{k}` has no values")));
        }
    }
    Ok(())
}

/// All grid points in lexicographic key order; an empty grid yields one
/// empty assignment.
pub fn grid_points(grid: &Grid) -> Vec<Vec<(String, Value)>> {
    grid.iter().fold(vec![Vec::new()], |acc, (k, vals)| {
        acc.iter()
            .flat_map(|point| {
                vals.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push((k.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

fn set(value: &mut Value, path: &[&str], v: Value) -> Result<()> {
    let mut cur = value;
    for key in &path[..path.len() - 1] {
        cur = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("cannot set `{}`", path.join("."))))?
            .entry(*key)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    cur.as_object_mut()
        .ok_or_else(|| Error::config(format!("cannot set `{}`", path.join("."))))?
        .insert(path[path.len() - 1].to_string(), v);
    Ok(())
}

/// Applies one grid point to the base config. `seed` sets the split,
/// training and model-initialization seeds together.
pub fn apply_point(base: &RunConfig, point: &[(String, Value)]) -> Result<RunConfig> {
    let mut value = config_to_value(base)?;
    for (k, v) in point {
        match k.as_str() {
            "seed" => {
                for path in [&["seeds", "split"][..], &["seeds", "train"], &["model", "seed"]] {
                    set(&mut value, path, v.clone())?;
                }
            }
            key => {
                let path: Vec<&str> = key.split('.').collect();
                set(&mut value, &path, v.clone())?;
            }
        }
    }
    if let Some(obj) = value.as_object_mut() {
        obj.remove("output_dir");
    }
    config_from_value(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub dir: String,
    pub point: BTreeMap<String, Value>,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
}

/// Runs every grid cell sequentially under `root/cell-NNN`; failures are
/// recorded and the sweep moves on. Writes `sweep.json` and the summaries.
pub fn cmd_sweep(base: &RunConfig, grid: &Grid, root: &Path) -> Result<Vec<SweepCell>> {
    validate_grid(grid)?;
    fs::create_dir_all(root)?;
    let points = grid_points(grid);
    let mut cells = Vec::with_capacity(points.len());
    for (index, point) in points.iter().enumerate() {
        let dir = format!("cell-{index:03}");
        let outcome = apply_point(base, point).and_then(|c| cmd_train(&c, &root.join(&dir)));
        let (status, error) = match outcome {
            Ok(_) => (RunStatus::Complete, None),
            Err(e) => {
                log::error!("sweep cell {dir} failed: {e}");
                (RunStatus::Incomplete, Some(e.to_string()))
            }
        };
        cells.push(SweepCell {
            index,
            dir,
            point: point.iter().cloned().collect(),
            status,
            error,
        });
        fs::write(root.join(SWEEP_FILE), serde_json::to_string_pretty(&cells)? + "\n")?;
    }
    summarize_sweep(root)?;
    Ok(cells)
}

/// One row of `summary.csv`: runs sharing method, hyperparameter, fraction,
/// criterion and guidance, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub hyperparameter: Option<f64>,
    pub fraction: f64,
    pub criterion: String,
    pub guided: bool,
    pub runs: usize,
    pub failed: usize,
    pub test_accuracy: Option<f64>,
    pub test_ece: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// `table.csv`: per method and subset fraction, the hyperparameter with the
/// best mean final validation accuracy, and its test numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub criterion: String,
    pub guided: bool,
    pub fraction: f64,
    pub hyperparameter: Option<f64>,
    /// Selected hyperparameters for fractions 1.0/0.3/0.2/0.1, `-` if absent.
    pub per_subset: String,
    pub test_accuracy: Option<f64>,
    pub test_ece: Option<f64>,
}

fn cell_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(super::manifest::MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

type Key = (String, String, bool, u64, Option<u64>);

/// Rebuilds `summary.csv` and `table.csv` from the manifests and final
/// reports under `root`; nothing is taken from memory.
pub fn summarize_sweep(root: &Path) -> Result<(Vec<SummaryRow>, Vec<TableRow>)> {
    let mut groups: BTreeMap<Key, (Vec<FinalReport>, usize)> = BTreeMap::new();
    for dir in cell_dirs(root)? {
        let m = ExperimentManifest::read(&dir)?;
        let c = &m.config;
        let cal = c.effective_calibration().unwrap_or(c.calibration);
        let criterion = serde_json::to_value(c.criterion)?.as_str().unwrap_or_default().to_string();
        let key: Key = (
            cal.method_name().to_string(),
            criterion,
            c.target.is_some(),
            c.subset.fraction.to_bits(),
            cal.hyperparameter().map(f64::to_bits),
        );
        let entry = groups.entry(key).or_default();
        let report = match m.status {
            RunStatus::Complete => fs::read_to_string(dir.join(FINAL_REPORT_FILE))
                .ok()
                .and_then(|t| serde_json::from_str::<FinalReport>(&t).ok()),
            _ => None,
        };
        match report {
            Some(r) => entry.0.push(r),
            None => entry.1 += 1,
        }
    }

    let summary: Vec<SummaryRow> = groups
        .iter()
        .map(|((method, criterion, guided, frac, hp), (reports, failed))| SummaryRow {
            method: method.clone(),
            hyperparameter: hp.map(f64::from_bits),
            fraction: f64::from_bits(*frac),
            criterion: criterion.clone(),
            guided: *guided,
            runs: reports.len(),
            failed: *failed,
            test_accuracy: mean(&reports.iter().map(|r| r.test_accuracy).collect::<Vec<_>>()),
            test_ece: mean(&reports.iter().map(|r| r.test_ece).collect::<Vec<_>>()),
            val_accuracy: mean(&reports.iter().map(|r| r.final_val_accuracy).collect::<Vec<_>>()),
        })
        .collect();

    let mut best: BTreeMap<(String, String, bool, u64), &SummaryRow> = BTreeMap::new();
    for row in summary.iter().filter(|r| r.runs > 0) {
        let key = (row.method.clone(), row.criterion.clone(), row.guided, row.fraction.to_bits());
        let better = match best.get(&key) {
            None => true,
            Some(b) => row.val_accuracy.unwrap_or(f64::NEG_INFINITY) > b.val_accuracy.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best.insert(key, row);
        }
    }
    let per_subset = |method: &str, criterion: &str, guided: bool| -> String {
        TABLE_FRACTIONS
            .iter()
            .map(|f| {
                best.get(&(method.to_string(), criterion.to_string(), guided, f.to_bits()))
                    .and_then(|r| r.hyperparameter)
                    .map_or("-".to_string(), |h| h.to_string())
            })
            .collect::<Vec<_>>()
            .join("/")
    };
    let table: Vec<TableRow> = best
        .values()
        .map(|r| TableRow {
            method: r.method.clone(),
            criterion: r.criterion.clone(),
            guided: r.guided,
            fraction: r.fraction,
            hyperparameter: r.hyperparameter,
            per_subset: per_subset(&r.method, &r.criterion, r.guided),
            test_accuracy: r.test_accuracy,
            test_ece: r.test_ece,
        })
        .collect();

    let mut w = csv::Writer::from_path(root.join(SUMMARY_FILE))?;
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(root.join(TABLE_FILE))?;
    for row in &table {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok((summary, table))
}
