//! The k-shot evaluation sweep.
//!
//! For every (feature source, head, k, draw), one episode is sampled from
//! the training split of the train instrument, the head is fitted on its
//! support set, and the fitted head is evaluated on the full held-out test
//! split of every test instrument. Using the complete test split (rather
//! than an episodic query subsample) mirrors evaluation against fixed test
//! datasets.
//!
//! Draw seeds follow a documented counter scheme:
//! `derive_seed(master_seed, "episode|k={k}|train={tag}|draw={i}")`.
//! The label deliberately excludes feature source, head and test instrument,
//! so a given draw selects the same support records for every configuration
//! (paired comparisons), and adding or removing configurations never
//! perturbs the draws of the others.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::eval::{balanced_accuracy_idx, EvalEntry, EvalReport};
use crate::fewshot::{
    fit_linear, fit_prototypes, sample_episode, ClassifierHead, HeadKind, LabelledEmbedding,
    LinearFitConfig, ProtoFitConfig,
};
use crate::imaging::Split;
use crate::rng::derive_seed;

/// One embedded dataset record. Vectors are stored as f32, matching the
/// on-disk cache precision, and widened to f64 for head fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub instrument: String,
    pub taxon: String,
    pub split: Split,
    pub vector: Vec<f32>,
}

/// All embeddings produced by one feature source (one encoder checkpoint or
/// one import), across instruments and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub feature_source: String,
    pub feature_dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingTable {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.vector.len() != self.feature_dim {
                return Err(Error::ShapeMismatch(format!(
                    "record '{}' has dim {}, table says {}",
                    r.id,
                    r.vector.len(),
                    self.feature_dim
                )));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding for record '{}'", r.id)));
            }
        }
        Ok(())
    }

    fn labelled_subset(&self, instrument: &str, split: Split) -> Vec<LabelledEmbedding> {
        self.records
            .iter()
            .filter(|r| r.instrument == instrument && r.split == split && !r.taxon.is_empty())
            .map(|r| LabelledEmbedding {
                id: r.id.clone(),
                taxon: r.taxon.clone(),
                vector: r.vector.iter().map(|&v| v as f64).collect(),
            })
            .collect()
    }
}

/// Sweep configuration: which sources, heads, shot counts and instrument
/// pairs to evaluate, and with how many repeated draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub heads: Vec<HeadKind>,
    pub train_instrument: String,
    pub test_instruments: Vec<String>,
    pub master_seed: u64,
    pub linear: LinearFitConfig,
    pub proto: ProtoFitConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 5, 10, 25],
            repeats: 20,
            heads: vec![HeadKind::Linear, HeadKind::Prototype],
            train_instrument: "P5".to_string(),
            test_instruments: vec!["P5".to_string(), "P4".to_string()],
            master_seed: 0,
            linear: LinearFitConfig::default(),
            proto: ProtoFitConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.heads.is_empty() || self.test_instruments.is_empty() {
            return Err(Error::InvalidSpec(
                "sweep needs at least one k, head and test instrument".into(),
            ));
        }
        if self.ks.contains(&0) {
            return Err(Error::InvalidSpec("k must be >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidSpec("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Run the full sweep over one table per feature source.
pub fn sweep_k(tables: &[EmbeddingTable], cfg: &SweepConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if tables.is_empty() {
        return Err(Error::InsufficientData("no embedding tables".into()));
    }
    for t in tables {
        t.validate()?;
    }

    let mut entries = Vec::new();
    for table in tables {
        let train_pool = table.labelled_subset(&cfg.train_instrument, Split::Train);
        if train_pool.is_empty() {
            return Err(Error::InsufficientData(format!(
                "feature source '{}' has no labelled train records for instrument '{}'",
                table.feature_source, cfg.train_instrument
            )));
        }
        let train_taxa: BTreeSet<&str> = train_pool.iter().map(|r| r.taxon.as_str()).collect();

        // Pre-extract each test split once.
        let mut test_sets = Vec::new();
        for ti in &cfg.test_instruments {
            let records = table.labelled_subset(ti, Split::Test);
            if records.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "feature source '{}' has no labelled test records for instrument '{ti}'",
                    table.feature_source
                )));
            }
            for r in &records {
                if !train_taxa.contains(r.taxon.as_str()) {
                    return Err(Error::InvalidSpec(format!(
                        "test record '{}' has taxon '{}' absent from the training split",
                        r.id, r.taxon
                    )));
                }
            }
            test_sets.push((ti.clone(), records));
        }

        for &head in &cfg.heads {
            for &k in &cfg.ks {
                // draws[test_instrument_index][draw_index]
                let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.repeats); test_sets.len()];
                for draw in 0..cfg.repeats {
                    let label = format!(
                        "episode|k={k}|train={}|draw={draw}",
                        cfg.train_instrument
                    );
                    let episode = sample_episode(&train_pool, k, derive_seed(cfg.master_seed, &label))?;
                    let support = episode.support_vectors();
                    let labels = episode.support_labels();

                    let fitted: Box<dyn ClassifierHead> = match head {
                        HeadKind::Linear => {
                            Box::new(fit_linear(&support, &labels, &episode.taxa, &cfg.linear)?)
                        }
                        HeadKind::Prototype => {
                            Box::new(fit_prototypes(&support, &labels, &episode.taxa, &cfg.proto)?)
                        }
                    };

                    for (ti_idx, (_, records)) in test_sets.iter().enumerate() {
                        let queries: Vec<Vec<f64>> = records
                            .iter()
                            .map(|r| r.vector.clone())
                            .collect();
                        let truth: Vec<usize> = records
                            .iter()
                            .map(|r| {
                                episode
                                    .taxa
                                    .iter()
                                    .position(|t| t == &r.taxon)
                                    .expect("taxon coverage checked above")
                            })
                            .collect();
                        let (pred, _) = fitted.predict(&queries)?;
                        let ba = balanced_accuracy_idx(&truth, &pred, episode.taxa.len())?;
                        draws[ti_idx].push(ba);
                    }
                }
                for (ti_idx, (ti, _)) in test_sets.iter().enumerate() {
                    entries.push(EvalEntry::from_draws(
                        table.feature_source.clone(),
                        head,
                        k,
                        cfg.train_instrument.clone(),
                        ti.clone(),
                        draws[ti_idx].clone(),
                    )?);
                }
            }
        }
    }

    Ok(EvalReport {
        master_seed: cfg.master_seed,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Two instruments, three taxa, Gaussian class clusters; the "shift"
    /// instrument adds an offset.
    fn synthetic_table(source: &str, seed: u64) -> EmbeddingTable {
        let mut rng = SplitMix64::new(seed);
        let dim = 8;
        let mut records = Vec::new();
        let centers: Vec<Vec<f64>> = (0..3)
            .map(|c| (0..dim).map(|d| if d == c { 2.0 } else { 0.0 }).collect())
            .collect();
        for inst in ["P5", "P4"] {
            for (c, center) in centers.iter().enumerate() {
                for i in 0..20 {
                    let split = if i < 10 { Split::Train } else { Split::Test };
                    let offset = if inst == "P4" { 0.3 } else { 0.0 };
                    let vector: Vec<f32> = center
                        .iter()
                        .map(|&m| (m + offset + 0.3 * rng.normal()) as f32)
                        .collect();
                    records.push(EmbeddingRecord {
                        id: format!("{inst}-{c}-{i}"),
                        instrument: inst.to_string(),
                        taxon: format!("taxon{c:02}"),
                        split,
                        vector,
                    });
                }
            }
        }
        EmbeddingTable {
            feature_source: source.to_string(),
            feature_dim: dim,
            records,
        }
    }

    #[test]
    fn single_k_single_repeat_gives_one_draw_per_configuration() {
        let tables = vec![synthetic_table("generic", 1)];
        let cfg = SweepConfig {
            ks: vec![1],
            repeats: 1,
            ..Default::default()
        };
        let report = sweep_k(&tables, &cfg).unwrap();
        // 1 source x 2 heads x 1 k x 2 test instruments.
        assert_eq!(report.entries.len(), 4);
        assert!(report.entries.iter().all(|e| e.draws.len() == 1));
    }

    #[test]
    fn sweep_is_deterministic() {
        let tables = vec![synthetic_table("generic", 2)];
        let cfg = SweepConfig {
            ks: vec![1, 3],
            repeats: 3,
            master_seed: 77,
            ..Default::default()
        };
        let a = sweep_k(&tables, &cfg).unwrap();
        let b = sweep_k(&tables, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adding_a_configuration_does_not_perturb_existing_draws() {
        let tables = vec![synthetic_table("generic", 3)];
        let small = SweepConfig {
            ks: vec![2],
            repeats: 4,
            heads: vec![HeadKind::Prototype],
            master_seed: 5,
            ..Default::default()
        };
        let large = SweepConfig {
            ks: vec![1, 2, 5],
            repeats: 4,
            heads: vec![HeadKind::Linear, HeadKind::Prototype],
            master_seed: 5,
            ..Default::default()
        };
        let small_report = sweep_k(&tables, &small).unwrap();
        let large_report = sweep_k(&tables, &large).unwrap();
        for e in &small_report.entries {
            let matching = large_report
                .entries
                .iter()
                .find(|l| {
                    l.feature_source == e.feature_source
                        && l.head == e.head
                        && l.k == e.k
                        && l.test_instrument == e.test_instrument
                })
                .expect("configuration present in the larger sweep");
            assert_eq!(e.draws, matching.draws);
        }
    }

    #[test]
    fn missing_train_split_is_reported() {
        let mut table = synthetic_table("generic", 4);
        table.records.retain(|r| r.split != Split::Train);
        let cfg = SweepConfig {
            ks: vec![1],
            repeats: 1,
            ..Default::default()
        };
        let err = sweep_k(&[table], &cfg).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }

    #[test]
    fn separable_clusters_score_high() {
        let tables = vec![synthetic_table("generic", 6)];
        let cfg = SweepConfig {
            ks: vec![5],
            repeats: 5,
            master_seed: 9,
            ..Default::default()
        };
        let report = sweep_k(&tables, &cfg).unwrap();
        for e in &report.entries {
            assert!(e.mean > 0.8, "{}/{}/k={} scored {}", e.feature_source, e.head, e.k, e.mean);
        }
    }
}
