//! Learned cosine-similarity prototypes.
//!
//! Prototypes start as the normalized per-taxon mean of L2-normalized
//! support embeddings; optional refinement minimizes cross-entropy of a
//! softmax over `scale * cosine(embedding, prototype)` by projected gradient
//! descent (exact cosine gradient, renormalize after every step).

use crate::error::{Error, Result};
use crate::fewshot::{normalize, ClassifierHead};

/// Optimization settings for [`fit_prototypes`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoFitConfig {
    /// Softmax sharpness on cosine logits; plain cosines in [-1, 1] barely
    /// move a softmax, so logits are scaled up.
    pub scale: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProtoFitConfig {
    fn default() -> Self {
        Self {
            scale: 10.0,
            epochs: 50,
            lr: 0.1,
        }
    }
}

/// One unit-norm prototype per taxon.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeHead {
    pub taxa: Vec<String>,
    pub feature_dim: usize,
    /// Unit-norm prototype vectors, one per taxon.
    pub prototypes: Vec<Vec<f64>>,
    pub scale: f64,
}

impl ClassifierHead for PrototypeHead {
    fn taxa(&self) -> &[String] {
        &self.taxa
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// scale * cosine(embedding, prototype); a zero embedding scores zero
    /// against every taxon.
    fn score(&self, embedding: &[f64]) -> Vec<f64> {
        let e_norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.prototypes
            .iter()
            .map(|p| {
                let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = e_norm * p_norm;
                if denom < 1e-30 {
                    return 0.0;
                }
                let dot: f64 = p.iter().zip(embedding).map(|(pi, ei)| pi * ei).sum();
                self.scale * dot / denom
            })
            .collect()
    }
}

/// Cross-entropy of the cosine softmax and its exact gradient with respect
/// to the prototype vectors (which need not be unit-norm here; the cosine's
/// normalization term is part of the gradient).
pub fn proto_loss_and_grad(
    prototypes: &[Vec<f64>],
    embeddings: &[Vec<f64>],
    labels: &[usize],
    scale: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n_class = prototypes.len();
    let dim = prototypes[0].len();
    let m = embeddings.len();
    if m == 0 {
        return Err(Error::InsufficientData("no embeddings".into()));
    }

    let mut loss = 0.0f64;
    let mut grads = vec![vec![0.0f64; dim]; n_class];
    let inv_m = 1.0 / m as f64;

    let p_norms: Vec<f64> = prototypes
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30))
        .collect();

    for (x, &y) in embeddings.iter().zip(labels) {
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        let mut cos = vec![0.0f64; n_class];
        let mut logits = vec![0.0f64; n_class];
        for c in 0..n_class {
            let dot: f64 = prototypes[c].iter().zip(x).map(|(p, e)| p * e).sum();
            cos[c] = dot / (x_norm * p_norms[c]);
            logits[c] = scale * cos[c];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - logits[y];

        for c in 0..n_class {
            let softmax = (logits[c] - log_z).exp();
            let dlogit = inv_m * (softmax - if c == y { 1.0 } else { 0.0 });
            if dlogit == 0.0 {
                continue;
            }
            // d cos / d p = (x/|x| - cos * p/|p|) / |p|
            let coef = scale * dlogit / p_norms[c];
            let g = &mut grads[c];
            for d in 0..dim {
                g[d] += coef * (x[d] / x_norm - cos[c] * prototypes[c][d] / p_norms[c]);
            }
        }
    }
    let loss = loss * inv_m;
    if !loss.is_finite() {
        return Err(Error::NonFinite("prototype loss".into()));
    }
    Ok((loss, grads))
}

/// Fit prototypes from support embeddings. Deterministic.
pub fn fit_prototypes(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    taxa: &[String],
    cfg: &ProtoFitConfig,
) -> Result<PrototypeHead> {
    if taxa.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "prototype fitting needs at least 2 taxa, got {}",
            taxa.len()
        )));
    }
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if !(cfg.scale > 0.0) {
        return Err(Error::InvalidSpec("scale must be positive".into()));
    }
    let dim = embeddings[0].len();
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::ShapeMismatch(format!("embedding {i} has dim {}", e.len())));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("support embedding {i}")));
        }
    }
    for &l in labels {
        if l >= taxa.len() {
            return Err(Error::InvalidSpec(format!("label {l} outside taxa list")));
        }
    }

    // Normalize supports once; prototypes are means of unit vectors.
    let unit: Vec<Vec<f64>> = embeddings.iter().map(|e| normalize(e)).collect();
    let mut prototypes = Vec::with_capacity(taxa.len());
    for (c, taxon) in taxa.iter().enumerate() {
        let members: Vec<&Vec<f64>> = unit
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(e, _)| e)
            .collect();
        if members.is_empty() {
            return Err(Error::InsufficientData(format!(
                "taxon '{taxon}' has no support examples"
            )));
        }
        let mut mean = vec![0.0f64; dim];
        for e in &members {
            for (mi, ei) in mean.iter_mut().zip(e.iter()) {
                *mi += ei;
            }
        }
        let inv = 1.0 / members.len() as f64;
        for mi in mean.iter_mut() {
            *mi *= inv;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "taxon '{taxon}': support embeddings sum to the zero vector, \
                 prototype undefined"
            )));
        }
        for mi in mean.iter_mut() {
            *mi /= norm;
        }
        prototypes.push(mean);
    }

    // Projected gradient descent on the cosine cross-entropy.
    for _ in 0..cfg.epochs {
        let (_, grads) = proto_loss_and_grad(&prototypes, &unit, labels, cfg.scale)?;
        for (p, g) in prototypes.iter_mut().zip(&grads) {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= cfg.lr * gi;
            }
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
            for pi in p.iter_mut() {
                *pi /= norm;
            }
        }
    }

    Ok(PrototypeHead {
        taxa: taxa.to_vec(),
        feature_dim: dim,
        prototypes,
        scale: cfg.scale,
    })
}
