//! Per-epoch subset selection: max-entropy top-k or uniform random, after a
//! full-pool warm-up.

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{predictive_entropy, EntropyScore};
use crate::models::Model;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MaxEntropy,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetSchedule {
    pub warmup_epochs: usize,
    /// Fraction of the pool trained on after warm-up, in `(0, 1]`.
    pub fraction: f64,
    pub pool_size: usize,
}

impl SubsetSchedule {
    pub fn new(warmup_epochs: usize, fraction: f64, pool_size: usize) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(format!("subset fraction must be in (0, 1], got {fraction}")));
        }
        if pool_size == 0 {
            return Err(Error::contract("empty pool"));
        }
        Ok(SubsetSchedule {
            warmup_epochs,
            fraction,
            pool_size,
        })
    }

    /// Epochs are 1-based.
    pub fn in_warmup(&self, epoch: usize) -> bool {
        epoch <= self.warmup_epochs
    }

    /// Samples trained on in `epoch`: the whole pool during warm-up, then
    /// `ceil(n·N)`.
    pub fn budget(&self, epoch: usize) -> usize {
        if self.in_warmup(epoch) || self.fraction >= 1.0 {
            self.pool_size
        } else {
            // guard against 0.3*45000 = 13500.000000000002
            let raw = self.fraction * self.pool_size as f64;
            let k = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
            (k as usize).clamp(1, self.pool_size)
        }
    }

    /// Whether `epoch` needs a scoring pass under max-entropy selection.
    pub fn needs_scores(&self, epoch: usize) -> bool {
        !self.in_warmup(epoch) && self.fraction < 1.0
    }
}

/// The subset trained on in one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub criterion: Criterion,
    /// Sorted ascending.
    pub ids: Vec<usize>,
    pub histogram: Vec<usize>,
    /// `|prev ∩ cur| / |cur|`; absent for the first epoch.
    pub overlap: Option<f64>,
}

/// Entropy of every pool sample under `model`, evaluated in batches. Ids are
/// pool row indices.
pub fn score_pool(model: &Model, pool: &Dataset, batch_size: usize) -> Result<Vec<EntropyScore>> {
    if pool.is_empty() {
        return Err(Error::contract("cannot score an empty pool"));
    }
    if batch_size == 0 {
        return Err(Error::config("score batch size must be ≥ 1"));
    }
    let ids: Vec<usize> = (0..pool.len()).collect();
    let mut scores = Vec::with_capacity(pool.len());
    for chunk in ids.chunks(batch_size) {
        let (x, _) = pool.batch(chunk);
        let probs = model.predict_proba(&x)?;
        scores.extend(
            predictive_entropy(&probs)
                .into_iter()
                .zip(chunk)
                .map(|(s, &id)| EntropyScore { id, entropy: s.entropy }),
        );
    }
    Ok(scores)
}

/// Ids of the `k` highest-entropy samples, ties to the smaller id, returned
/// sorted by id.
pub fn select_topk(scores: &[EntropyScore], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::contract(format!(
            "top-k with k={k} over {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<&EntropyScore> = scores.iter().collect();
    let cmp = |a: &&EntropyScore, b: &&EntropyScore| b.entropy.total_cmp(&a.entropy).then(a.id.cmp(&b.id));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    let mut ids: Vec<usize> = order[..k].iter().map(|s| s.id).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Uniform sample of `k` ids without replacement, sorted.
pub fn select_random(pool_ids: &[usize], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k == 0 || k > pool_ids.len() {
        return Err(Error::contract(format!(
            "random selection of {k} from {} ids",
            pool_ids.len()
        )));
    }
    let mut ids: Vec<usize> = index::sample(rng, pool_ids.len(), k)
        .into_iter()
        .map(|i| pool_ids[i])
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

pub fn overlap_fraction(prev_ids: &[usize], cur_ids: &[usize]) -> Result<f64> {
    if cur_ids.is_empty() || prev_ids.is_empty() {
        return Err(Error::contract("overlap of an empty selection"));
    }
    let prev: HashSet<usize> = prev_ids.iter().copied().collect();
    let common = cur_ids.iter().filter(|id| prev.contains(id)).count();
    Ok(common as f64 / cur_ids.len() as f64)
}

pub fn class_histogram(ids: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut hist = vec![0; num_classes];
    for &id in ids {
        let y = *labels
            .get(id)
            .ok_or_else(|| Error::Data(format!("sample id {id} outside pool of {}", labels.len())))?;
        if y >= num_classes {
            return Err(Error::Data(format!("label {y} ≥ class count {num_classes}")));
        }
        hist[y] += 1;
    }
    Ok(hist)
}

/// `max count / min count`. A class with no samples counts as 1 so the ratio
/// stays finite.
pub fn balance_ratio(histogram: &[usize]) -> f64 {
    let max = histogram.iter().copied().max().unwrap_or(0);
    let min = histogram.iter().copied().min().unwrap_or(0).max(1);
    max as f64 / min as f64
}

/// Where a post-warm-up selection comes from.
pub enum SelectionSource<'a> {
    Scores(&'a [EntropyScore]),
    Random(&'a mut Rng),
}

/// Builds the selection for `epoch` (1-based).
pub fn epoch_subset(
    schedule: &SubsetSchedule,
    epoch: usize,
    criterion: Criterion,
    source: Option<SelectionSource<'_>>,
    previous: Option<&SelectionRecord>,
    labels: &[usize],
    num_classes: usize,
) -> Result<SelectionRecord> {
    if epoch == 0 {
        return Err(Error::contract("epochs are numbered from 1"));
    }
    if labels.len() != schedule.pool_size {
        return Err(Error::contract(format!(
            "{} labels for a pool of {}",
            labels.len(),
            schedule.pool_size
        )));
    }
    let n = schedule.pool_size;
    let k = schedule.budget(epoch);
    let ids = if k == n {
        (0..n).collect()
    } else {
        match (criterion, source) {
            (Criterion::MaxEntropy, Some(SelectionSource::Scores(scores))) => {
                if scores.len() != n {
                    return Err(Error::contract(format!("{} scores for a pool of {n}", scores.len())));
                }
                select_topk(scores, k)?
            }
            (Criterion::MaxEntropy, _) => {
                return Err(Error::contract(format!("max-entropy selection at epoch {epoch} needs scores")))
            }
            (Criterion::Random, Some(SelectionSource::Random(rng))) => {
                let all: Vec<usize> = (0..n).collect();
                select_random(&all, k, rng)?
            }
            (Criterion::Random, _) => {
                return Err(Error::contract(format!("random selection at epoch {epoch} needs an rng")))
            }
        }
    };
    let histogram = class_histogram(&ids, labels, num_classes)?;
    let overlap = previous.map(|p| overlap_fraction(&p.ids, &ids)).transpose()?;
    Ok(SelectionRecord {
        epoch,
        criterion,
        ids,
        histogram,
        overlap,
    })
}
