//! Command-line front end: config parsing, runs, sweeps and report bundles.

pub mod config;
pub mod manifest;
pub mod report;
pub mod sweep;
pub mod train;

pub use config::{config_from_value, config_to_value, parse_config, parse_config_str};
pub use manifest::{ExperimentManifest, RunStatus};
pub use report::{cmd_report, ReportBundle};
pub use sweep::{cmd_sweep, parse_grid, summarize_sweep, Grid};
pub use train::{cmd_pretrain_target, cmd_train, run_dir, FinalReport, TrainOutcome};
