//! Supervised pre-training: backbone plus a temporary softmax head trained
//! with cross-entropy, emulating a generic general-purpose initialization on
//! labelled synthetic data. The head is discarded afterwards.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::imaging::ParticleImage;
use crate::rng::{derive_seed, SplitMix64};

use super::net::{trace_backward, trace_forward, EncoderGrads};
use super::{EncoderParams, Space};

/// Hyperparameters of the supervised stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Per-epoch training log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// SGD step with classical momentum on one tensor: v ← m·v + g, p ← p − lr·v.
pub(crate) fn sgd_vec(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

/// Train backbone + temporary softmax head with mini-batch SGD and
/// cross-entropy; returns refined parameters and the per-epoch loss log.
/// Deterministic per (params, data order, config).
pub fn supervised_pretrain(
    params: &EncoderParams,
    images: &[ParticleImage],
    labels: &[usize],
    n_classes: usize,
    cfg: &PretrainConfig,
) -> Result<(EncoderParams, Vec<EpochStat>)> {
    params.config.validate()?;
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if n_classes < 2 {
        return Err(Error::InsufficientData(format!(
            "supervised pre-training needs at least 2 classes, got {n_classes}"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidSpec(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    {
        let mut seen = vec![false; n_classes];
        for &l in labels {
            seen[l] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::InsufficientData(
                "supervised pre-training needs examples from at least 2 classes".into(),
            ));
        }
    }
    if images.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidSpec("batch_size must be positive".into()));
    }

    let mut trained = params.clone();
    if cfg.epochs == 0 {
        return Ok((trained, Vec::new()));
    }

    let f = params.config.feature_dim;
    // Temporary softmax head, discarded on return.
    let mut head_rng = SplitMix64::new(derive_seed(cfg.seed, "pretrain-head"));
    let std = (2.0 / f as f64).sqrt();
    let mut head_w: Vec<f64> = (0..n_classes * f).map(|_| std * head_rng.normal()).collect();
    let mut head_b = vec![0.0f64; n_classes];

    let mut velocity: Vec<Vec<f64>> = trained.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut head_w_vel = vec![0.0f64; head_w.len()];
    let mut head_b_vel = vec![0.0f64; head_b.len()];

    let mut shuffle_rng = SplitMix64::new(derive_seed(cfg.seed, "pretrain-shuffle"));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let batch_images: Vec<ParticleImage> =
                chunk.iter().map(|&i| images[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let bs = chunk.len();

            let trace = trace_forward(&trained, &batch_images)?;
            // Softmax cross-entropy on head logits.
            let mut g_features = vec![0.0f64; bs * f];
            let mut g_head_w = vec![0.0f64; head_w.len()];
            let mut g_head_b = vec![0.0f64; head_b.len()];
            let mut batch_loss = 0.0f64;
            for b in 0..bs {
                let x = &trace.features[b * f..(b + 1) * f];
                let mut logits = vec![0.0f64; n_classes];
                for (c, logit) in logits.iter_mut().enumerate() {
                    let row = &head_w[c * f..(c + 1) * f];
                    *logit = head_b[c] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                batch_loss += log_z - logits[batch_labels[b]];
                for c in 0..n_classes {
                    let softmax = (logits[c] - log_z).exp();
                    let delta = (softmax - if c == batch_labels[b] { 1.0 } else { 0.0 }) / bs as f64;
                    g_head_b[c] += delta;
                    let w_row = &head_w[c * f..(c + 1) * f];
                    let gw_row = &mut g_head_w[c * f..(c + 1) * f];
                    for i in 0..f {
                        gw_row[i] += delta * x[i];
                        g_features[b * f + i] += delta * w_row[i];
                    }
                }
            }
            let batch_loss = batch_loss / bs as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pre-training loss at epoch {epoch}"
                )));
            }
            loss_sum += batch_loss * bs as f64;
            seen += bs;

            let grads = trace_backward(&trained, &trace, &g_features, Space::Backbone)?;
            apply_sgd(&mut trained, &grads, &mut velocity, cfg.lr, cfg.momentum);
            sgd_vec(&mut head_w, &g_head_w, &mut head_w_vel, cfg.lr, cfg.momentum);
            sgd_vec(&mut head_b, &g_head_b, &mut head_b_vel, cfg.lr, cfg.momentum);
        }

        log.push(EpochStat {
            epoch,
            mean_loss: loss_sum / seen as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok((trained, log))
}

/// Apply one SGD-with-momentum update to the encoder parameters.
pub(crate) fn apply_sgd(
    params: &mut EncoderParams,
    grads: &EncoderGrads,
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) {
    let grad_tensors = grads.tensors();
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(velocity.iter_mut())
    {
        sgd_vec(p, g, v, lr, momentum);
    }
}
