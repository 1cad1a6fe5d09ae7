//! Selection driven by a frozen, larger, pre-trained "target" model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::EntropyScore;
use crate::models::{load_checkpoint_for, Model, TrainingMeta};
use crate::prioritization::score_pool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecomputePolicy {
    /// Score the pool once and reuse the ranking every epoch.
    #[default]
    Once,
    EveryEpoch,
}

#[derive(Debug, Clone)]
pub struct TargetGuide {
    model: Model,
    meta: Option<TrainingMeta>,
    checkpoint: Option<PathBuf>,
    policy: RecomputePolicy,
    pool_size: usize,
    batch_size: usize,
    cached: Option<Vec<EntropyScore>>,
    evaluations: usize,
    warnings: Vec<String>,
}

impl TargetGuide {
    /// Wraps an in-memory target. `current_params` is the size of the model
    /// being trained; a target that is not larger only triggers a warning.
    pub fn from_model(
        model: Model,
        pool: &Dataset,
        policy: RecomputePolicy,
        current_params: Option<usize>,
        batch_size: usize,
    ) -> Result<Self> {
        if model.config().num_classes != pool.num_classes() {
            return Err(Error::config(format!(
                "target predicts {} classes but the pool has {}",
                model.config().num_classes,
                pool.num_classes()
            )));
        }
        let mut warnings = Vec::new();
        if let Some(cur) = current_params {
            if model.param_count() <= cur {
                let msg = format!(
                    "target has {} parameters, not more than the current model's {cur}",
                    model.param_count()
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        let mut guide = TargetGuide {
            model,
            meta: None,
            checkpoint: None,
            policy,
            pool_size: pool.len(),
            batch_size,
            cached: None,
            evaluations: 0,
            warnings,
        };
        if policy == RecomputePolicy::Once {
            guide.cached = Some(guide.evaluate(pool)?);
        }
        Ok(guide)
    }

    fn evaluate(&mut self, pool: &Dataset) -> Result<Vec<EntropyScore>> {
        self.evaluations += 1;
        score_pool(&self.model, pool, self.batch_size)
    }

    /// Entropy scores from the target for `epoch`.
    pub fn target_scores(&mut self, pool: &Dataset, epoch: usize) -> Result<Vec<EntropyScore>> {
        if pool.len() != self.pool_size {
            return Err(Error::contract(format!(
                "pool changed size from {} to {} (epoch {epoch})",
                self.pool_size,
                pool.len()
            )));
        }
        match (&self.cached, self.policy) {
            (Some(c), RecomputePolicy::Once) => Ok(c.clone()),
            _ => self.evaluate(pool),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn meta(&self) -> Option<&TrainingMeta> {
        self.meta.as_ref()
    }

    pub fn checkpoint(&self) -> Option<&Path> {
        self.checkpoint.as_deref()
    }

    pub fn policy(&self) -> RecomputePolicy {
        self.policy
    }

    /// Number of full scoring passes run so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn cached_scores(&self) -> Option<&[EntropyScore]> {
        self.cached.as_deref()
    }
}

/// Loads a target checkpoint for `pool`; under [`RecomputePolicy::Once`] the
/// pool is scored immediately.
pub fn prepare_target(
    checkpoint_path: &Path,
    pool: &Dataset,
    policy: RecomputePolicy,
    current_params: Option<usize>,
    batch_size: usize,
) -> Result<TargetGuide> {
    let (model, meta) = load_checkpoint_for(checkpoint_path, pool.num_classes())?;
    let mut guide = TargetGuide::from_model(model, pool, policy, current_params, batch_size)?;
    guide.meta = Some(meta);
    guide.checkpoint = Some(checkpoint_path.to_path_buf());
    Ok(guide)
}

pub const SCORES_MAGIC: &[u8; 8] = b"CPRIOSCR";
pub const SCORES_VERSION: u32 = 1;

/// FNV-1a over the pool's labels and feature bits, so a cached score file is
/// only reused for the exact pool it was computed on.
pub fn pool_fingerprint(pool: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(pool.len() as u64);
    pool.labels().iter().for_each(|&y| eat(y as u64));
    pool.features().data().iter().for_each(|v| eat(v.to_bits()));
    h
}

/// Layout (little-endian): magic `CPRIOSCR`, u32 version, u64 pool
/// fingerprint, u64 count, f64 entropies in id order.
pub fn save_scores(path: &Path, fingerprint: u64, scores: &[EntropyScore]) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + 8 * scores.len());
    buf.extend_from_slice(SCORES_MAGIC);
    buf.extend_from_slice(&SCORES_VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint.to_le_bytes());
    buf.extend_from_slice(&(scores.len() as u64).to_le_bytes());
    for (i, s) in scores.iter().enumerate() {
        if s.id != i {
            return Err(Error::contract("scores must be in id order"));
        }
        buf.extend_from_slice(&s.entropy.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Returns `None` when the file belongs to a different pool.
pub fn load_scores(path: &Path, fingerprint: u64) -> Result<Option<Vec<EntropyScore>>> {
    let bytes = fs::read(path)?;
    let bad = |offset: usize, m: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: m.into(),
    };
    if bytes.len() < 28 || &bytes[..8] != SCORES_MAGIC {
        return Err(bad(0, "not a score cache"));
    }
    if u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != SCORES_VERSION {
        return Err(bad(8, "unsupported score cache version"));
    }
    if u64::from_le_bytes(bytes[12..20].try_into().unwrap()) != fingerprint {
        return Ok(None);
    }
    let n = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    if bytes.len() != 28 + 8 * n {
        return Err(bad(28, "score block length mismatch"));
    }
    Ok(Some(
        bytes[28..]
            .chunks_exact(8)
            .enumerate()
            .map(|(id, c)| EntropyScore {
                id,
                entropy: f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect(),
    ))
}
