//! Episode sampling and the two few-shot heads: one-vs-all logistic
//! regression and learned cosine-similarity prototypes.

mod linear;
mod proto;
mod store;

pub use linear::{fit_linear, logistic_objective, LinearFitConfig, LinearHead};
pub use proto::{fit_prototypes, proto_loss_and_grad, ProtoFitConfig, PrototypeHead};
pub use store::{load_head, save_head, StoredHead};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

/// Which few-shot head a sweep configuration uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Prototype,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Prototype => "prototype",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A labelled embedding with the identity of its source record.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledEmbedding {
    pub id: String,
    pub taxon: String,
    pub vector: Vec<f64>,
}

/// One member of an episode; `source_index` points into the record list the
/// episode was sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    pub source_index: usize,
    pub class: usize,
    pub vector: Vec<f64>,
}

/// A stratified k-shot support set plus the disjoint query remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Ordered class names; `EpisodeItem::class` indexes into this.
    pub taxa: Vec<String>,
    pub k: usize,
    pub draw_seed: u64,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn support_vectors(&self) -> Vec<Vec<f64>> {
        self.support.iter().map(|i| i.vector.clone()).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.class).collect()
    }
}

/// Draw a uniform stratified episode: exactly `k` support items per taxon,
/// without replacement; everything else becomes the query set. Deterministic
/// per seed. Errors when any taxon has fewer than k+1 records.
pub fn sample_episode(records: &[LabelledEmbedding], k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidSpec("k must be >= 1".into()));
    }
    if records.is_empty() {
        return Err(Error::InsufficientData("no labelled records".into()));
    }
    let dim = records[0].vector.len();
    let mut taxa: Vec<String> = Vec::new();
    for r in records {
        if r.taxon.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "record '{}' is unlabelled",
                r.id
            )));
        }
        if r.vector.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "record '{}' has dim {}, expected {dim}",
                r.id,
                r.vector.len()
            )));
        }
        if !taxa.contains(&r.taxon) {
            taxa.push(r.taxon.clone());
        }
    }
    taxa.sort_unstable();

    let mut rng = SplitMix64::new(derive_seed(seed, "episode"));
    let mut support = Vec::with_capacity(k * taxa.len());
    let mut query = Vec::new();
    for (class, taxon) in taxa.iter().enumerate() {
        let mut indices: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.taxon == taxon)
            .map(|(i, _)| i)
            .collect();
        if indices.len() < k + 1 {
            return Err(Error::InsufficientData(format!(
                "taxon '{taxon}' has {} records; k={k} leaves an insufficient query remainder",
                indices.len()
            )));
        }
        rng.shuffle(&mut indices);
        for (pos, &src) in indices.iter().enumerate() {
            let item = EpisodeItem {
                source_index: src,
                class,
                vector: records[src].vector.clone(),
            };
            if pos < k {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }

    Ok(Episode {
        taxa,
        k,
        draw_seed: seed,
        support,
        query,
    })
}

/// Classification surface shared by both head types: per-taxon scores with
/// argmax prediction, ties broken by taxa order (first wins).
pub trait ClassifierHead {
    fn taxa(&self) -> &[String];

    /// Embedding width the head expects.
    fn feature_dim(&self) -> usize;

    /// Per-taxon scores for one embedding.
    fn score(&self, embedding: &[f64]) -> Vec<f64>;

    /// Predicted class indices and the full score matrix.
    fn predict(&self, embeddings: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let mut labels = Vec::with_capacity(embeddings.len());
        let mut scores = Vec::with_capacity(embeddings.len());
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != self.feature_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "embedding {i} has dim {}, head expects {}",
                    e.len(),
                    self.feature_dim()
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding {i}")));
            }
            let s = self.score(e);
            labels.push(argmax_first(&s));
            scores.push(s);
        }
        Ok((labels, scores))
    }
}

/// Index of the maximum score; on exact ties the earliest index wins.
#[inline]
pub(crate) fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = scores[0];
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// L2-normalize a vector; an all-zero vector is returned unchanged.
pub(crate) fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-30 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}
