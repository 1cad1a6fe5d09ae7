//! Classifier architectures and the binary checkpoint format.
//!
//! Two kinds are supported: a ReLU MLP and a small residual CNN without
//! normalization layers. The residual branch's second convolution starts
//! scaled down so the identity path dominates at initialization.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationConfig;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Tape, Tensor, Var};
use crate::rng::{self, Stream};

/// Initial scale of the last convolution in every residual branch.
pub const RESIDUAL_BRANCH_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Rescnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_classes: usize,
    /// Hidden units (mlp) or channels (rescnn).
    pub width: usize,
    /// Hidden layers (mlp) or residual blocks (rescnn).
    pub depth: usize,
    /// Per-sample shape; `[C, H, W]` for rescnn.
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Stride of the rescnn stem convolution.
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
}

fn default_stem_stride() -> usize {
    1
}

impl ModelConfig {
    pub fn mlp(input_dim: usize, width: usize, depth: usize, num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            num_classes,
            width,
            depth,
            input_shape: vec![input_dim],
            seed,
            stem_stride: 1,
        }
    }

    pub fn rescnn(input_shape: [usize; 3], width: usize, blocks: usize, num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::Rescnn,
            num_classes,
            width,
            depth: blocks,
            input_shape: input_shape.to_vec(),
            seed,
            stem_stride: 1,
        }
    }

    pub fn with_stem_stride(mut self, stride: usize) -> Self {
        self.stem_stride = stride;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be ≥ 2, got {}", self.num_classes)));
        }
        if self.width == 0 {
            return Err(Error::config("width must be ≥ 1"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::config(format!("bad input_shape {:?}", self.input_shape)));
        }
        if self.kind == ModelKind::Rescnn {
            if self.input_shape.len() != 3 {
                return Err(Error::config(format!(
                    "rescnn needs input_shape [C, H, W], got {:?}",
                    self.input_shape
                )));
            }
            if self.stem_stride == 0 {
                return Err(Error::config("stem_stride must be ≥ 1"));
            }
        }
        Ok(())
    }

    /// Spatial size after the stem (3×3, pad 1).
    fn feature_hw(&self) -> (usize, usize) {
        let s = self.stem_stride;
        ((self.input_shape[1] - 1) / s + 1, (self.input_shape[2] - 1) / s + 1)
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (k, w) = (self.num_classes, self.width);
        let mut shapes = Vec::new();
        match self.kind {
            ModelKind::Mlp => {
                let mut fan_in = self.input_dim();
                for _ in 0..self.depth {
                    shapes.push(vec![fan_in, w]);
                    shapes.push(vec![w]);
                    fan_in = w;
                }
                shapes.push(vec![fan_in, k]);
                shapes.push(vec![k]);
            }
            ModelKind::Rescnn => {
                let c = self.input_shape[0];
                shapes.push(vec![w, c, 3, 3]);
                shapes.push(vec![w]);
                for _ in 0..self.depth {
                    for _ in 0..2 {
                        shapes.push(vec![w, w, 3, 3]);
                        shapes.push(vec![w]);
                    }
                }
                let (h, ww) = self.feature_hw();
                shapes.push(vec![w * h * ww, k]);
                shapes.push(vec![k]);
            }
        }
        shapes
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (k, w) = (self.num_classes, self.width);
        match self.kind {
            ModelKind::Mlp => {
                if self.depth == 0 {
                    self.input_dim() * k + k
                } else {
                    self.input_dim() * w + w + (self.depth - 1) * (w * w + w) + w * k + k
                }
            }
            ModelKind::Rescnn => {
                let c = self.input_shape[0];
                let (h, ww) = self.feature_hw();
                (w * c * 9 + w) + self.depth * 2 * (w * w * 9 + w) + (w * h * ww * k + k)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    Model::build(config.clone())
}

impl Model {
    /// Deterministic scaled-uniform fan-in initialization; biases start at 0.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derive(config.seed, Stream::Init, 0);
        let shapes = config.param_shapes();
        let n = shapes.len();
        let mut params = Vec::with_capacity(n);
        for (i, shape) in shapes.into_iter().enumerate() {
            let size: usize = shape.iter().product();
            if shape.len() == 1 {
                params.push(Tensor::zeros(shape));
                continue;
            }
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[0]
            };
            let is_head = i == n - 2;
            // ReLU layers get the He bound; the head stays small so fresh
            // models start near-uniform.
            let mut bound = if is_head {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            if config.kind == ModelKind::Rescnn && !is_head && i >= 2 && (i - 2) % 4 == 2 {
                bound *= RESIDUAL_BRANCH_SCALE;
            }
            let data = (0..size).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            *p = Tensor::new(p.shape().to_vec(), flat[off..off + n].to_vec())?;
            off += n;
        }
        Ok(())
    }

    /// Replaces every parameter tensor; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("parameter shapes do not match the model"));
        }
        self.params = params;
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().get(1..) != Some(self.config.input_shape.as_slice()) {
            return Err(Error::dim(format!(
                "batch shape {:?} does not match model input [B, {:?}]",
                batch.shape(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass. Parameters become trainable leaves when
    /// `trainable`, otherwise constants; their vars are returned in storage
    /// order.
    pub fn forward(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        self.check_batch(tape.value(input))?;
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        let logits = match self.config.kind {
            ModelKind::Mlp => {
                let mut h = tape.flatten(input);
                for layer in 0..self.config.depth {
                    let a = tape.affine(h, pv[2 * layer], pv[2 * layer + 1])?;
                    h = tape.relu(a);
                }
                let d = self.config.depth;
                tape.affine(h, pv[2 * d], pv[2 * d + 1])?
            }
            ModelKind::Rescnn => {
                let stem = tape.conv2d(input, pv[0], Some(pv[1]), self.config.stem_stride, 1)?;
                let mut h = tape.relu(stem);
                for blk in 0..self.config.depth {
                    let o = 2 + 4 * blk;
                    let a = tape.conv2d(h, pv[o], Some(pv[o + 1]), 1, 1)?;
                    let a = tape.relu(a);
                    let b = tape.conv2d(a, pv[o + 2], Some(pv[o + 3]), 1, 1)?;
                    let sum = tape.add(h, b)?;
                    h = tape.relu(sum);
                }
                let flat = tape.flatten(h);
                let n = pv.len();
                tape.affine(flat, pv[n - 2], pv[n - 1])?
            }
        };
        Ok((logits, pv))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (out, _) = self.forward(&mut tape, x, false)?;
        Ok(tape.value(out).clone())
    }

    /// Class posteriors for a batch, evaluated without augmentation.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        softmax(&self.logits(batch)?)
    }
}

pub fn predict_proba(model: &Model, batch: &Tensor) -> Result<Tensor> {
    model.predict_proba(batch)
}

/// Provenance stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub calibration: CalibrationConfig,
    pub val_accuracy: Option<f64>,
    pub val_ece: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_ece: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    meta: TrainingMeta,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CPRIOCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout (little-endian): magic `CPRIOCKP`, u32 version, u32 header length,
/// header JSON `{config, meta}`, u64 parameter count, f64 parameters.
pub fn encode_checkpoint(model: &Model, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config.clone(),
        meta: meta.clone(),
    })?;
    let n = model.param_count();
    let mut buf = Vec::with_capacity(24 + header.len() + 8 * n);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for p in &model.params {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, TrainingMeta)> {
    let fmt = |offset: usize, message: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt(0, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = 16 + hlen;
    if bytes.len() < body + 8 {
        return Err(fmt(16, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    let n = u64::from_le_bytes(bytes[body..body + 8].try_into().unwrap()) as usize;
    let expected = header.config.param_count();
    if n != expected {
        return Err(Error::config(format!(
            "checkpoint holds {n} parameters but its config implies {expected}"
        )));
    }
    let data = &bytes[body + 8..];
    if data.len() != 8 * n {
        return Err(fmt(body + 8, "parameter block length mismatch"));
    }
    let flat: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = Model::build(header.config)?;
    model.set_flat_params(&flat)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &Model, meta: &TrainingMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainingMeta)> {
    decode_checkpoint(&fs::read(path)?, path)
}

/// Loads a checkpoint and refuses it unless it predicts `num_classes` classes.
pub fn load_checkpoint_for(path: &Path, num_classes: usize) -> Result<(Model, TrainingMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if model.config.num_classes != num_classes {
        return Err(Error::config(format!(
            "checkpoint {} predicts {} classes, expected {num_classes}",
            path.display(),
            model.config.num_classes
        )));
    }
    Ok((model, meta))
}
