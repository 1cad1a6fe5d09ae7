//! Per-run manifest: what ran, with which settings, and which files it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::trainer::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const TIMING_FILE: &str = "timing.csv";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const FINAL_REPORT_FILE: &str = "final_report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub version: String,
    pub config: RunConfig,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// Artifact name → file name relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub normalization: Option<NormStats>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn version_stamp() -> String {
    format!("calprio {}", env!("CARGO_PKG_VERSION"))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// FNV-1a of the config's canonical JSON.
pub fn config_hash(config: &RunConfig) -> Result<u64> {
    let text = serde_json::to_string(config)?;
    Ok(text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    }))
}

/// `<method>-n<fraction>-<hash>`, stable for a given config.
pub fn run_id(config: &RunConfig) -> Result<String> {
    Ok(format!(
        "{}-n{}-{:08x}",
        config.calibration.method_name(),
        config.subset.fraction,
        config_hash(config)? as u32
    ))
}

impl ExperimentManifest {
    pub fn new(run_id: String, config: RunConfig) -> Self {
        ExperimentManifest {
            run_id,
            version: version_stamp(),
            config,
            started_unix: unix_now(),
            finished_unix: None,
            status: RunStatus::Running,
            error: None,
            artifacts: BTreeMap::new(),
            normalization: None,
            warnings: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn artifact_path(&self, dir: &Path, name: &str) -> Option<PathBuf> {
        self.artifacts.get(name).map(|f| dir.join(f))
    }

    /// Every referenced artifact exists under `dir`.
    pub fn missing_artifacts(&self, dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|(_, f)| !dir.join(f).is_file())
            .map(|(k, _)| k.clone())
            .collect()
    }
}
