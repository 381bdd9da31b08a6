//! Contrastive self-supervised refinement.
//!
//! A batch of N images becomes 2N augmented views whose projection-space
//! vectors are pulled together when they come from the same image and pushed
//! apart otherwise. Rows are interleaved: (view-a of item 0, view-b of item
//! 0, view-a of item 1, ...), so the positive partner of row i is i^1.

use std::time::Instant;

use crate::encoder::{apply_sgd, trace_backward, trace_forward, EncoderParams, EpochStat, Space};
use crate::error::{Error, Result};
use crate::imaging::{make_view_pair, AugmentPolicy, ParticleImage};
use crate::rng::{derive_seed, SplitMix64};

/// A validated 2N×D batch of unit-norm projection vectors.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub n: usize,
    pub dim: usize,
    pub temperature: f64,
    rows: Vec<f64>,
}

impl ContrastiveBatch {
    /// Build from interleaved rows. Requires N ≥ 2, unit-norm rows
    /// (within 1e-6) and a positive temperature.
    pub fn new(rows: Vec<f64>, n: usize, dim: usize, temperature: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "contrastive batch needs N >= 2 items (each anchor must see a negative), got {n}"
            )));
        }
        if rows.len() != 2 * n * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {}x{dim} batch, got {}",
                2 * n * dim,
                2 * n,
                rows.len()
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        for (i, row) in rows.chunks_exact(dim).enumerate() {
            let mut sq = 0.0;
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("projection row {i}")));
                }
                sq += v * v;
            }
            if (sq.sqrt() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidSpec(format!(
                    "projection row {i} has norm {:.9}, expected 1",
                    sq.sqrt()
                )));
            }
        }
        Ok(Self { n, dim, temperature, rows })
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Temperature-scaled contrastive loss and its exact gradient with respect
/// to the projection rows.
///
/// For anchor i with positive partner j, the per-anchor term is
/// −log( exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ) ), averaged over all 2N anchors;
/// every non-positive row (both views included) acts as a negative.
pub fn nt_xent_loss(batch: &ContrastiveBatch) -> Result<(f64, Vec<f64>)> {
    nt_xent_raw(&batch.rows, 2 * batch.n, batch.dim, batch.temperature)
}

/// Loss core on raw rows. Similarities are plain dot products, which equal
/// cosines on the unit-norm rows [`ContrastiveBatch`] guarantees; on
/// arbitrary rows this is exactly the function the gradient differentiates,
/// which is what finite-difference checks probe.
pub fn nt_xent_raw(rows: &[f64], two_n: usize, dim: usize, temperature: f64) -> Result<(f64, Vec<f64>)> {
    if two_n < 4 || !two_n.is_multiple_of(2) {
        return Err(Error::InsufficientData(format!(
            "need an even row count >= 4, got {two_n}"
        )));
    }
    if rows.len() != two_n * dim {
        return Err(Error::ShapeMismatch(format!(
            "expected {} values, got {}",
            two_n * dim,
            rows.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidSpec("temperature must be positive".into()));
    }

    let inv_tau = 1.0 / temperature;
    // Full similarity matrix.
    let mut sim = vec![0.0f64; two_n * two_n];
    for i in 0..two_n {
        let zi = &rows[i * dim..(i + 1) * dim];
        for k in (i + 1)..two_n {
            let zk = &rows[k * dim..(k + 1) * dim];
            let dot: f64 = zi.iter().zip(zk).map(|(a, b)| a * b).sum();
            sim[i * two_n + k] = dot;
            sim[k * two_n + i] = dot;
        }
    }

    let mut loss = 0.0f64;
    let mut grad = vec![0.0f64; two_n * dim];
    let scale = 1.0 / (two_n as f64);

    for i in 0..two_n {
        let partner = i ^ 1;
        // Log-sum-exp over k != i, stabilized by the max.
        let mut max = f64::NEG_INFINITY;
        for k in 0..two_n {
            if k != i {
                max = max.max(sim[i * two_n + k] * inv_tau);
            }
        }
        let mut sum_exp = 0.0f64;
        for k in 0..two_n {
            if k != i {
                sum_exp += (sim[i * two_n + k] * inv_tau - max).exp();
            }
        }
        let lse = max + sum_exp.ln();
        loss += lse - sim[i * two_n + partner] * inv_tau;

        // d loss_i / d s_ik = (alpha_ik - [k == partner]) / tau, alpha the
        // softmax over the negatives+positive of this anchor.
        let zi = &rows[i * dim..(i + 1) * dim];
        for k in 0..two_n {
            if k == i {
                continue;
            }
            let alpha = (sim[i * two_n + k] * inv_tau - lse).exp();
            let coef = scale * inv_tau * (alpha - if k == partner { 1.0 } else { 0.0 });
            if coef == 0.0 {
                continue;
            }
            let zk = &rows[k * dim..(k + 1) * dim];
            let gi = &mut grad[i * dim..(i + 1) * dim];
            for d in 0..dim {
                gi[d] += coef * zk[d];
            }
            let gk = &mut grad[k * dim..(k + 1) * dim];
            for d in 0..dim {
                gk[d] += coef * zi[d];
            }
        }
    }

    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok((loss, grad))
}

/// Hyperparameters of the self-supervised stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    /// Images per step; each contributes two views.
    pub batch_n: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub policy: AugmentPolicy,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            batch_n: 64,
            temperature: 0.5,
            epochs: 30,
            lr: 0.02,
            momentum: 0.9,
            policy: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_n < 2 {
            return Err(Error::InvalidSpec(format!(
                "batch_n must be >= 2, got {}",
                self.batch_n
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidSpec("temperature must be positive".into()));
        }
        self.policy.validate()
    }
}

/// Augment every image into an interleaved list of 2N views.
fn make_views(
    images: &[&ParticleImage],
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<Vec<ParticleImage>> {
    let mut views = Vec::with_capacity(images.len() * 2);
    for (i, img) in images.iter().enumerate() {
        let (a, b) = make_view_pair(img, policy, derive_seed(seed, &format!("item{i}")))?;
        views.push(a);
        views.push(b);
    }
    Ok(views)
}

/// Augment a batch of images into view pairs and project them, preserving
/// the interleaved ordering.
pub fn build_contrastive_batch(
    params: &EncoderParams,
    images: &[&ParticleImage],
    policy: &AugmentPolicy,
    temperature: f64,
    seed: u64,
) -> Result<ContrastiveBatch> {
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "contrastive batch needs at least 2 images, got {}",
            images.len()
        )));
    }
    let views = make_views(images, policy, seed)?;
    let batch = crate::encoder::forward(params, &views, Space::Projection)?;
    ContrastiveBatch::new(
        batch.data().to_vec(),
        images.len(),
        params.config.proj_dim,
        temperature,
    )
}

/// Contrastive refinement loop: epochs of shuffled mini-batches, each step
/// building view pairs, computing the contrastive loss, and backpropagating
/// through projection head and backbone with momentum SGD.
pub fn simclr_refine(
    params: &EncoderParams,
    images: &[ParticleImage],
    cfg: &SslConfig,
) -> Result<(EncoderParams, Vec<EpochStat>)> {
    cfg.validate()?;
    params.config.validate()?;
    if images.len() < 2 * cfg.batch_n {
        return Err(Error::InsufficientData(format!(
            "self-supervised refinement needs at least {} images (2x batch_n), got {}",
            2 * cfg.batch_n,
            images.len()
        )));
    }

    let mut trained = params.clone();
    if cfg.epochs == 0 {
        return Ok((trained, Vec::new()));
    }

    let mut velocity: Vec<Vec<f64>> = trained.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut shuffle_rng = SplitMix64::new(derive_seed(cfg.seed, "ssl-shuffle"));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;

        // Full batches only; a trailing partial batch is dropped.
        for (step, chunk) in order.chunks_exact(cfg.batch_n).enumerate() {
            let batch_refs: Vec<&ParticleImage> = chunk.iter().map(|&i| &images[i]).collect();
            let view_seed = derive_seed(cfg.seed, &format!("ssl|epoch={epoch}|step={step}"));
            let views = make_views(&batch_refs, &cfg.policy, view_seed)?;

            let trace = trace_forward(&trained, &views)?;
            let (loss, grad_proj) = nt_xent_raw(
                &trace.proj,
                2 * cfg.batch_n,
                trained.config.proj_dim,
                cfg.temperature,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "contrastive loss diverged at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss;
            steps += 1;

            let grads = trace_backward(&trained, &trace, &grad_proj, Space::Projection)?;
            apply_sgd(&mut trained, &grads, &mut velocity, cfg.lr, cfg.momentum);
        }

        log.push(EpochStat {
            epoch,
            mean_loss: loss_sum / steps as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok((trained, log))
}
