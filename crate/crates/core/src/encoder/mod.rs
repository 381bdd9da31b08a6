//! Convolutional backbone with projection head: configuration, parameters,
//! explicit forward/backward passes, supervised pre-training, and the binary
//! checkpoint format.
//!
//! The backbone is a stack of strided 3×3 convolutions with ReLU (no batch
//! normalization; He init keeps activation scales stable) followed by global
//! average pooling. Images enter through a fixed box-filter downsample to
//! `input_size`. The projection head is two affine layers with a ReLU in
//! between whose output is L2-normalized; few-shot heads consume backbone
//! features, the projection space exists for contrastive training.

mod net;
mod pretrain;

pub use net::{backward, forward, EncoderGrads};
pub(crate) use net::{trace_backward, trace_forward};
pub(crate) use pretrain::apply_sgd;
pub use pretrain::{supervised_pretrain, EpochStat, PretrainConfig};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::IMAGE_SIDE;
use crate::rng::{derive_seed, fnv1a64, SplitMix64};

/// One convolution block: `out_channels` filters of size `kernel`×`kernel`
/// applied with `stride` and same-padding, followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture of the encoder. Activation is fixed to ReLU and pooling to
/// global average; weight shapes are derivable from this config alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Images are box-resampled to this side length before the first block.
    pub input_size: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// Backbone output width; must equal the last block's channel count.
    pub feature_dim: usize,
    /// Projection head output width.
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            conv_blocks: vec![
                ConvBlock { out_channels: 8, kernel: 3, stride: 2 },
                ConvBlock { out_channels: 16, kernel: 3, stride: 2 },
                ConvBlock { out_channels: 32, kernel: 3, stride: 2 },
                ConvBlock { out_channels: 64, kernel: 3, stride: 2 },
            ],
            feature_dim: 64,
            proj_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidSpec("need at least one conv block".into()));
        }
        if !(2..=self.feature_dim).contains(&self.proj_dim) {
            return Err(Error::InvalidSpec(format!(
                "need feature_dim >= proj_dim >= 2, got {} and {}",
                self.feature_dim, self.proj_dim
            )));
        }
        let last = self.conv_blocks.last().unwrap();
        if last.out_channels != self.feature_dim {
            return Err(Error::InvalidSpec(format!(
                "feature_dim {} must equal the last block's out_channels {}",
                self.feature_dim, last.out_channels
            )));
        }
        if self.input_size < 4 || self.input_size > IMAGE_SIDE {
            return Err(Error::InvalidSpec(format!(
                "input_size {} outside [4, {IMAGE_SIDE}]",
                self.input_size
            )));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.stride == 0 || b.kernel == 0 || b.kernel % 2 == 0 {
                return Err(Error::InvalidSpec(format!(
                    "block {i}: channels/stride must be positive and kernel odd, got {b:?}"
                )));
            }
        }
        // Spatial extent must stay positive through the stack.
        let mut size = self.input_size;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            size = conv_out_size(size, b.kernel, b.stride);
            if size == 0 {
                return Err(Error::InvalidSpec(format!(
                    "block {i} reduces the spatial extent to zero"
                )));
            }
        }
        Ok(())
    }

    /// Spatial side length after each block, starting from `input_size`.
    pub fn plane_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.conv_blocks.len() + 1);
        sizes.push(self.input_size);
        let mut s = self.input_size;
        for b in &self.conv_blocks {
            s = conv_out_size(s, b.kernel, b.stride);
            sizes.push(s);
        }
        sizes
    }

    /// Stable digest over the canonical textual form of the config; stored
    /// in checkpoints so mismatched architectures are refused at load time.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }

    fn canonical_string(&self) -> String {
        let blocks: Vec<String> = self
            .conv_blocks
            .iter()
            .map(|b| format!("{}x{}s{}", b.out_channels, b.kernel, b.stride))
            .collect();
        format!(
            "in={};blocks={};feat={};proj={}",
            self.input_size,
            blocks.join(","),
            self.feature_dim,
            self.proj_dim
        )
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut in_ch = 1;
        for b in &self.conv_blocks {
            n += b.out_channels * in_ch * b.kernel * b.kernel + b.out_channels;
            in_ch = b.out_channels;
        }
        n += self.feature_dim * self.feature_dim + self.feature_dim;
        n += self.proj_dim * self.feature_dim + self.proj_dim;
        n
    }
}

#[inline]
pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (input + 2 * pad - kernel) / stride + 1
}

/// All learnable weights of the backbone and projection head.
///
/// Tensor declaration order (also the checkpoint layout): per block weight
/// then bias, then fc1 weight/bias, then fc2 weight/bias. Conv weights are
/// flattened `[out][in][ky][kx]`, fc weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub init_seed: u64,
    pub conv_w: Vec<Vec<f64>>,
    pub conv_b: Vec<Vec<f64>>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

impl EncoderParams {
    /// Visit every tensor in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            t.push(w);
            t.push(b);
        }
        t.push(&self.fc1_w);
        t.push(&self.fc1_b);
        t.push(&self.fc2_w);
        t.push(&self.fc2_b);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t: Vec<&mut Vec<f64>> = Vec::new();
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            t.push(w);
            t.push(b);
        }
        t.push(&mut self.fc1_w);
        t.push(&mut self.fc1_b);
        t.push(&mut self.fc2_w);
        t.push(&mut self.fc2_b);
        t
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// He-style fan-in scaled init: weights ~ N(0, 2/fan_in), zero biases.
/// Deterministic per (config, seed).
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = SplitMix64::new(derive_seed(seed, "encoder-init"));
    let mut conv_w = Vec::new();
    let mut conv_b = Vec::new();
    let mut in_ch = 1usize;
    for b in &config.conv_blocks {
        let fan_in = in_ch * b.kernel * b.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let n = b.out_channels * fan_in;
        conv_w.push((0..n).map(|_| std * rng.normal()).collect());
        conv_b.push(vec![0.0; b.out_channels]);
        in_ch = b.out_channels;
    }
    let f = config.feature_dim;
    let p = config.proj_dim;
    let std1 = (2.0 / f as f64).sqrt();
    let fc1_w = (0..f * f).map(|_| std1 * rng.normal()).collect();
    let fc2_w = (0..p * f).map(|_| std1 * rng.normal()).collect();
    Ok(EncoderParams {
        config: config.clone(),
        init_seed: seed,
        conv_w,
        conv_b,
        fc1_w,
        fc1_b: vec![0.0; f],
        fc2_w,
        fc2_b: vec![0.0; p],
    })
}

/// Embedding space a forward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    /// Global-average-pooled backbone output, unnormalized.
    Backbone,
    /// Projection head output, L2-normalized.
    Projection,
}

/// A batch of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub rows: usize,
    pub dim: usize,
    pub space: Space,
    pub normalized: bool,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(data: Vec<f64>, rows: usize, dim: usize, space: Space, normalized: bool) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding batch: {} values for {rows}x{dim}",
                data.len()
            )));
        }
        let batch = Self { rows, dim, space, normalized, data };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.data.chunks_exact(self.dim).enumerate() {
            let mut sq = 0.0;
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("embedding row {i}")));
                }
                sq += v * v;
            }
            if self.normalized && (sq.sqrt() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidSpec(format!(
                    "row {i} marked normalized but has norm {}",
                    sq.sqrt()
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"BEMB1";

/// Write a parameter checkpoint: magic "BEMB1", config digest, init seed,
/// float count, then little-endian f32 values per tensor in declaration
/// order. Written atomically (temp file + rename).
pub fn save_checkpoint(path: &Path, params: &EncoderParams) -> Result<()> {
    let tensors = params.tensors();
    let n_floats: usize = tensors.iter().map(|t| t.len()).sum();
    let mut bytes = Vec::with_capacity(5 + 24 + 4 * n_floats);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&params.config.digest().to_le_bytes());
    bytes.extend_from_slice(&params.init_seed.to_le_bytes());
    bytes.extend_from_slice(&(n_floats as u64).to_le_bytes());
    for t in tensors {
        for &v in t {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint written by [`save_checkpoint`]. The caller supplies the
/// architecture; a digest mismatch is refused.
pub fn load_checkpoint(path: &Path, config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 5 + 24 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity(format!(
            "{}: not a BEMB1 checkpoint",
            path.display()
        )));
    }
    let digest = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    if digest != config.digest() {
        return Err(Error::Integrity(format!(
            "{}: checkpoint config digest {digest:016x} does not match the requested \
             architecture ({:016x})",
            path.display(),
            config.digest()
        )));
    }
    let init_seed = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let n_floats = u64::from_le_bytes(bytes[21..29].try_into().unwrap()) as usize;
    if bytes.len() != 29 + 4 * n_floats || n_floats != config.param_count() {
        return Err(Error::Integrity(format!(
            "{}: checkpoint holds {n_floats} floats, expected {}",
            path.display(),
            config.param_count()
        )));
    }
    let mut values = bytes[29..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);

    let mut params = init_params(config, init_seed)?;
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = values.next().expect("length checked above");
        }
    }
    params.init_seed = init_seed;
    if !params.all_finite() {
        return Err(Error::NonFinite(format!("{}: checkpoint values", path.display())));
    }
    Ok(params)
}

/// Digest of a file's raw bytes; links caches to the checkpoint that
/// produced them.
pub fn file_digest(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(fnv1a64(&bytes))
}
