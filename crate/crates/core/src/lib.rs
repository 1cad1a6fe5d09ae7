//! Training harness for calibration-aware sample prioritization.
//!
//! A classifier is trained on the full pool for a number of warm-up epochs and
//! then on a per-epoch subset chosen by predictive entropy (or uniformly at
//! random). The loss can be calibrated in-training with label smoothing, mixup
//! or focal loss, and selection can optionally be driven by a larger frozen
//! "target" model instead of the model being trained.
//!
//! Everything runs on a small define-by-run autodiff engine in [`numerics`].

pub mod calibration;
pub mod data;
pub mod error;
pub mod expcli;
pub mod guidance;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod prioritization;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
