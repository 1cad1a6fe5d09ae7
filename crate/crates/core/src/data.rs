//! Datasets: CIFAR binary ingestion, a Gaussian-cluster generator, the
//! seeded train/validation split and per-channel normalization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Stream};

/// Environment variable naming the directory that holds CIFAR binaries.
pub const DATA_DIR_ENV: &str = "CALPRIO_DATA_DIR";

pub const CIFAR_IMAGE_BYTES: usize = 3072;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];

/// Dimension of the latent space the synthetic class centres are drawn in.
/// Keeping it small makes some class pairs much closer than others.
pub const SYNTHETIC_LATENT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pool,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Labelled samples. Sample ids are the row indices `0..N`; `source_ids`
/// maps them back to rows of the dataset this one was split from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
    pub source_ids: Vec<usize>,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} ≥ class count {num_classes}")));
        }
        let n = labels.len();
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
            source_ids: (0..n).collect(),
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Features and labels for the given sample ids, in order.
    pub fn batch(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        (self.features.gather_rows(ids), ids.iter().map(|&i| self.labels[i]).collect())
    }

    /// Subset with fresh contiguous ids.
    pub fn subset(&self, ids: &[usize], split: Split) -> Result<Dataset> {
        if ids.is_empty() {
            return Err(Error::contract("empty subset"));
        }
        let (features, labels) = self.batch(ids);
        Ok(Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            split,
            source_ids: ids.iter().map(|&i| self.source_ids[i]).collect(),
            norm: self.norm.clone(),
        })
    }

    /// Per-channel mean and population standard deviation. The channel axis
    /// is the first axis of the sample shape.
    pub fn channel_stats(&self) -> NormStats {
        let channels = self.sample_shape()[0];
        let per = self.features.row_len() / channels;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let count = (self.len() * per) as f64;
        for row in self.features.data().chunks_exact(channels * per) {
            for (c, plane) in row.chunks_exact(per).enumerate() {
                mean[c] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for row in self.features.data().chunks_exact(channels * per) {
            for (c, plane) in row.chunks_exact(per).enumerate() {
                sq[c] += plane.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        NormStats { mean, std }
    }

    /// Applies `(x − mean) / std` per channel and records the statistics.
    pub fn normalize(&mut self, stats: &NormStats) -> Result<()> {
        let channels = self.sample_shape()[0];
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::dim(format!(
                "normalization stats for {} channels, data has {channels}",
                stats.mean.len()
            )));
        }
        let per = self.features.row_len() / channels;
        let shape = self.features.shape().to_vec();
        let mut data = std::mem::replace(&mut self.features, Tensor::scalar(0.0)).into_data();
        for row in data.chunks_exact_mut(channels * per) {
            for (c, plane) in row.chunks_exact_mut(per).enumerate() {
                let s = if stats.std[c] > 0.0 { stats.std[c] } else { 1.0 };
                for v in plane {
                    *v = (*v - stats.mean[c]) / s;
                }
            }
        }
        self.features = Tensor::new(shape, data)?;
        self.norm = Some(stats.clone());
        Ok(())
    }
}

/// Parses concatenated CIFAR records: `label_bytes` label bytes followed by
/// 3072 pixel bytes (R, G, B planes of 32×32, row-major). The label at
/// `label_index` is used; pixels are scaled to `[0, 1]`.
pub fn parse_cifar_records(
    bytes: &[u8],
    path: &Path,
    label_bytes: usize,
    label_index: usize,
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let rec = label_bytes + CIFAR_IMAGE_BYTES;
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (whole * rec) as u64,
            message: format!(
                "length {} is not a multiple of the {rec}-byte record size; truncated record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, chunk) in bytes.chunks_exact(rec).enumerate() {
        let label = chunk[label_index] as usize;
        if label >= num_classes {
            return Err(Error::Data(format!(
                "{}: record {i} (byte offset {}) has label {label} ≥ {num_classes}",
                path.display(),
                i * rec + label_index
            )));
        }
        labels.push(label);
        pixels.extend(chunk[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_cifar_files(files: &[PathBuf], label_bytes: usize, label_index: usize, k: usize, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = fs::read(f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        let (p, l) = parse_cifar_records(&bytes, f, label_bytes, label_index, k)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::Data("no CIFAR records found".into()));
    }
    let shape = vec![labels.len(), CIFAR_SHAPE[0], CIFAR_SHAPE[1], CIFAR_SHAPE[2]];
    Dataset::new(Tensor::new(shape, pixels)?, labels, k, split)
}

/// Reads `data_batch_1..5.bin` (the train+validation pool) and
/// `test_batch.bin`. Pixels are in `[0, 1]`; normalize after splitting.
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let pool = load_cifar_files(&train, 1, 0, 10, Split::Pool)?;
    let test = load_cifar_files(&[dir.join("test_batch.bin")], 1, 0, 10, Split::Test)?;
    Ok((pool, test))
}

/// CIFAR-100 binary layout: coarse label byte, fine label byte, pixels. The
/// fine label is used.
pub fn load_cifar100_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let pool = load_cifar_files(&[dir.join("train.bin")], 2, 1, 100, Split::Pool)?;
    let test = load_cifar_files(&[dir.join("test.bin")], 2, 1, 100, Split::Test)?;
    Ok((pool, test))
}

/// Gaussian class clusters. Class centres live in a small latent space
/// embedded into the sample space, scaled by `separation`; samples add unit
/// isotropic noise.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    num_classes: usize,
    dims: Vec<usize>,
    centres: Vec<Vec<f64>>,
    seed: u64,
}

impl SyntheticGenerator {
    pub fn new(num_classes: usize, dims: &[usize], separation: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::contract(format!("need at least 2 classes, got {num_classes}")));
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::contract(format!("bad sample shape {dims:?}")));
        }
        if !(separation >= 0.0 && separation.is_finite()) {
            return Err(Error::config(format!("separation must be ≥ 0, got {separation}")));
        }
        let d: usize = dims.iter().product();
        let mut rng = rng::derive(seed, Stream::Synthetic, u64::MAX);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let r = SYNTHETIC_LATENT_DIM;
        // random embedding with entries N(0, 1/d): latent distances carry over
        let embed: Vec<f64> = (0..d * r).map(|_| normal() / (d as f64).sqrt()).collect();
        let centres = (0..num_classes)
            .map(|_| {
                let z: Vec<f64> = (0..r).map(|_| normal()).collect();
                (0..d)
                    .map(|i| separation * (0..r).map(|j| embed[i * r + j] * z[j]).sum::<f64>())
                    .collect()
            })
            .collect();
        Ok(SyntheticGenerator {
            num_classes,
            dims: dims.to_vec(),
            centres,
            seed,
        })
    }

    /// `n` balanced samples from stream `stream`; class order is shuffled.
    pub fn sample(&self, n: usize, stream: u64, split: Split) -> Result<Dataset> {
        if n < self.num_classes {
            return Err(Error::contract(format!(
                "need N ≥ K for balanced classes, got N={n}, K={}",
                self.num_classes
            )));
        }
        let mut rng = rng::derive(self.seed, Stream::Synthetic, stream);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        labels.shuffle(&mut rng);
        let d: usize = self.dims.iter().product();
        let mut data = Vec::with_capacity(n * d);
        for &y in &labels {
            for &m in &self.centres[y] {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(m + e);
            }
        }
        let mut shape = vec![n];
        shape.extend(&self.dims);
        Dataset::new(Tensor::new(shape, data)?, labels, self.num_classes, split)
    }
}

pub fn make_synthetic(num_classes: usize, n: usize, dims: &[usize], separation: f64, seed: u64) -> Result<Dataset> {
    SyntheticGenerator::new(num_classes, dims, separation, seed)?.sample(n, 0, Split::Pool)
}

/// Seeded shuffle, then the first `round(fraction·N)` samples become the
/// training split and the rest validation.
pub fn split_train_val(pool: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    if pool.is_empty() {
        return Err(Error::contract("cannot split an empty pool"));
    }
    let n = pool.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::contract(format!(
            "split of {n} samples at {fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, Stream::Split, 0));
    let train = pool.subset(&order[..n_train], Split::Train)?;
    let val = pool.subset(&order[n_train..], Split::Val)?;
    Ok((train, val))
}

/// Where a run's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        /// Train + validation pool size.
        pool_size: usize,
        test_size: usize,
        /// Per-sample shape.
        dims: Vec<usize>,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        /// Falls back to `CALPRIO_DATA_DIR`.
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Keep only the first records of the pool / test set.
        #[serde(default)]
        pool_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar100 {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        pool_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::Cifar10 { .. } => 10,
            DatasetSpec::Cifar100 { .. } => 100,
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            DatasetSpec::Synthetic { dims, .. } => dims.clone(),
            _ => CIFAR_SHAPE.to_vec(),
        }
    }

    fn resolve_dir(dir: &Option<PathBuf>) -> Result<PathBuf> {
        dir.clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::config(format!("no dataset dir given and {DATA_DIR_ENV} is unset")))
    }

    /// Pool (train + validation) and test sets, unnormalized.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let limit = |ds: Dataset, lim: &Option<usize>| -> Result<Dataset> {
            match *lim {
                Some(n) if n < ds.len() => {
                    let ids: Vec<usize> = (0..n).collect();
                    ds.subset(&ids, ds.split)
                }
                _ => Ok(ds),
            }
        };
        match self {
            DatasetSpec::Synthetic {
                classes,
                pool_size,
                test_size,
                dims,
                separation,
                seed,
            } => {
                let g = SyntheticGenerator::new(*classes, dims, *separation, *seed)?;
                Ok((g.sample(*pool_size, 0, Split::Pool)?, g.sample(*test_size, 1, Split::Test)?))
            }
            DatasetSpec::Cifar10 {
                dir,
                pool_limit,
                test_limit,
            } => {
                let (p, t) = load_cifar10_binary(&Self::resolve_dir(dir)?)?;
                Ok((limit(p, pool_limit)?, limit(t, test_limit)?))
            }
            DatasetSpec::Cifar100 {
                dir,
                pool_limit,
                test_limit,
            } => {
                let (p, t) = load_cifar100_binary(&Self::resolve_dir(dir)?)?;
                Ok((limit(p, pool_limit)?, limit(t, test_limit)?))
            }
        }
    }
}

/// Normalized train / validation / test sets for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
}

/// Loads, splits, and normalizes everything with training-split statistics.
pub fn prepare_data(spec: &DatasetSpec, train_fraction: f64, split_seed: u64) -> Result<PreparedData> {
    let (pool, mut test) = spec.load()?;
    let (mut train, mut val) = split_train_val(&pool, train_fraction, split_seed)?;
    let norm = train.channel_stats();
    train.normalize(&norm)?;
    val.normalize(&norm)?;
    test.normalize(&norm)?;
    Ok(PreparedData { train, val, test, norm })
}
