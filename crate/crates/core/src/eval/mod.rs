//! Balanced accuracy, confusion matrices, the k-shot evaluation sweep, and
//! the cross-instrument robustness comparison.

mod report;
mod sweep;

pub use report::{read_report_json, write_fig2_csv, write_report_json, write_table1_csv};
pub use sweep::{sweep_k, EmbeddingRecord, EmbeddingTable, SweepConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::HeadKind;

/// Unweighted mean of per-taxon recall over class indices in `0..n_taxa`.
///
/// Every taxon must appear at least once among the true labels, otherwise
/// its recall is undefined.
pub fn balanced_accuracy_idx(truth: &[usize], predicted: &[usize], n_taxa: usize) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() || n_taxa == 0 {
        return Err(Error::InsufficientData("empty label lists".into()));
    }
    let mut total = vec![0u64; n_taxa];
    let mut correct = vec![0u64; n_taxa];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_taxa {
            return Err(Error::InvalidSpec(format!("true label {t} outside taxa")));
        }
        if p >= n_taxa {
            return Err(Error::InvalidSpec(format!("predicted label {p} outside taxa")));
        }
        total[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let mut sum = 0.0f64;
    for c in 0..n_taxa {
        if total[c] == 0 {
            return Err(Error::InsufficientData(format!(
                "taxon index {c} has no true instances; recall undefined"
            )));
        }
        sum += correct[c] as f64 / total[c] as f64;
    }
    Ok(sum / n_taxa as f64)
}

/// [`balanced_accuracy_idx`] over string labels against an explicit taxa
/// list; labels outside the list are rejected.
pub fn balanced_accuracy(truth: &[String], predicted: &[String], taxa: &[String]) -> Result<f64> {
    let lookup = |label: &String| -> Result<usize> {
        taxa.iter()
            .position(|t| t == label)
            .ok_or_else(|| Error::InvalidSpec(format!("label '{label}' not in taxa list")))
    };
    let t: Result<Vec<usize>> = truth.iter().map(lookup).collect();
    let p: Result<Vec<usize>> = predicted.iter().map(lookup).collect();
    balanced_accuracy_idx(&t?, &p?, taxa.len())
}

/// C×C count matrix indexed (true, predicted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub taxa: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_indices(truth: &[usize], predicted: &[usize], taxa: &[String]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let c = taxa.len();
        let mut counts = vec![0u64; c * c];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= c || p >= c {
                return Err(Error::InvalidSpec(format!(
                    "label pair ({t}, {p}) outside taxa list of size {c}"
                )));
            }
            counts[t * c + p] += 1;
        }
        Ok(Self {
            taxa: taxa.to_vec(),
            counts,
        })
    }

    #[inline]
    pub fn count(&self, true_idx: usize, pred_idx: usize) -> u64 {
        self.counts[true_idx * self.taxa.len() + pred_idx]
    }

    pub fn row_sum(&self, true_idx: usize) -> u64 {
        let c = self.taxa.len();
        self.counts[true_idx * c..(true_idx + 1) * c].iter().sum()
    }

    /// Total off-diagonal count.
    pub fn errors(&self) -> u64 {
        let c = self.taxa.len();
        (0..c)
            .flat_map(|t| (0..c).map(move |p| (t, p)))
            .filter(|(t, p)| t != p)
            .map(|(t, p)| self.count(t, p))
            .sum()
    }

    /// Balanced accuracy recomputed from the matrix; bitwise identical to
    /// the label-level computation because both divide per-taxon counts in
    /// the same order.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        let c = self.taxa.len();
        let mut sum = 0.0f64;
        for t in 0..c {
            let total = self.row_sum(t);
            if total == 0 {
                return Err(Error::InsufficientData(format!(
                    "taxon '{}' has no true instances; recall undefined",
                    self.taxa[t]
                )));
            }
            sum += self.count(t, t) as f64 / total as f64;
        }
        Ok(sum / c as f64)
    }
}

/// Build a confusion matrix from string labels.
pub fn confusion(truth: &[String], predicted: &[String], taxa: &[String]) -> Result<ConfusionMatrix> {
    let lookup = |label: &String| -> Result<usize> {
        taxa.iter()
            .position(|t| t == label)
            .ok_or_else(|| Error::InvalidSpec(format!("label '{label}' not in taxa list")))
    };
    let t: Result<Vec<usize>> = truth.iter().map(lookup).collect();
    let p: Result<Vec<usize>> = predicted.iter().map(lookup).collect();
    ConfusionMatrix::from_indices(&t?, &p?, taxa)
}

/// One evaluated configuration with its per-draw balanced accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub feature_source: String,
    pub head: HeadKind,
    pub k: usize,
    pub train_instrument: String,
    pub test_instrument: String,
    pub draws: Vec<f64>,
    pub mean: f64,
    pub stdev: f64,
}

impl EvalEntry {
    pub fn from_draws(
        feature_source: String,
        head: HeadKind,
        k: usize,
        train_instrument: String,
        test_instrument: String,
        draws: Vec<f64>,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::InsufficientData("entry needs at least one draw".into()));
        }
        let (mean, stdev) = mean_stdev(&draws);
        let entry = Self {
            feature_source,
            head,
            k,
            train_instrument,
            test_instrument,
            draws,
            mean,
            stdev,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws.is_empty() {
            return Err(Error::InsufficientData("entry needs at least one draw".into()));
        }
        for &d in &self.draws {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::InvalidSpec(format!(
                    "balanced accuracy {d} outside [0, 1]"
                )));
            }
        }
        let (mean, stdev) = mean_stdev(&self.draws);
        if (mean - self.mean).abs() > 1e-12 || (stdev - self.stdev).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "stored statistics ({}, {}) disagree with draws ({mean}, {stdev})",
                self.mean, self.stdev
            )));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation (0 for a single draw).
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Full evaluation output: every configuration with all draws persisted so
/// uncertainty bands can be recomputed downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub master_seed: u64,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            e.validate()?;
        }
        Ok(())
    }
}

/// One row of the cross-instrument comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub feature_source: String,
    pub head: HeadKind,
    pub k: usize,
    pub same_mean: f64,
    pub shifted_mean: f64,
    /// same - shifted; positive when the shift costs accuracy.
    pub drop: f64,
}

/// Summarize same-instrument vs cross-instrument accuracy per
/// (feature source, head, k). Every group must contain a same-instrument
/// entry and at least one cross-instrument entry.
pub fn shift_comparison(report: &EvalReport) -> Result<Vec<ShiftRow>> {
    report.validate()?;
    let mut keys: Vec<(String, HeadKind, usize)> = report
        .entries
        .iter()
        .map(|e| (e.feature_source.clone(), e.head, e.k))
        .collect();
    keys.sort();
    keys.dedup();

    let mut rows = Vec::new();
    for (source, head, k) in keys {
        let group: Vec<&EvalEntry> = report
            .entries
            .iter()
            .filter(|e| e.feature_source == source && e.head == head && e.k == k)
            .collect();
        let same: Vec<&&EvalEntry> = group
            .iter()
            .filter(|e| e.train_instrument == e.test_instrument)
            .collect();
        let shifted: Vec<&&EvalEntry> = group
            .iter()
            .filter(|e| e.train_instrument != e.test_instrument)
            .collect();
        if same.len() != 1 || shifted.is_empty() {
            return Err(Error::InsufficientData(format!(
                "configuration ({source}, {head}, k={k}) needs one same-instrument entry and \
                 at least one shifted entry, found {} and {}",
                same.len(),
                shifted.len()
            )));
        }
        for sh in shifted {
            rows.push(ShiftRow {
                feature_source: source.clone(),
                head,
                k,
                same_mean: same[0].mean,
                shifted_mean: sh.mean,
                drop: same[0].mean - sh.mean,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn strings(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_predictions_give_one() {
        let t = vec![0, 1, 2, 0, 1, 2];
        assert_eq!(balanced_accuracy_idx(&t, &t, 3).unwrap(), 1.0);
    }

    #[test]
    fn mean_of_recalls() {
        // Taxon 0 recall 0.8 (4/5), taxon 1 recall 0.6 (3/5).
        let truth = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let pred = vec![0, 0, 0, 0, 1, 1, 1, 1, 0, 0];
        let ba = balanced_accuracy_idx(&truth, &pred, 2).unwrap();
        assert!((ba - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_majority_predictor_scores_one_over_c() {
        let truth = vec![0, 1, 2, 0, 1, 2, 0, 1, 2];
        let pred = vec![0; 9];
        let ba = balanced_accuracy_idx(&truth, &pred, 3).unwrap();
        assert!((ba - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn missing_taxon_is_an_error() {
        let truth = vec![0, 0, 1];
        let pred = vec![0, 1, 1];
        assert!(balanced_accuracy_idx(&truth, &pred, 3).is_err());
    }

    #[test]
    fn equals_plain_accuracy_on_uniform_truth() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..50 {
            let c = 2 + rng.next_index(4);
            let per = 5 + rng.next_index(10);
            let mut truth = Vec::new();
            for class in 0..c {
                truth.extend(std::iter::repeat_n(class, per));
            }
            let pred: Vec<usize> = truth.iter().map(|_| rng.next_index(c)).collect();
            let ba = balanced_accuracy_idx(&truth, &pred, c).unwrap();
            let plain = truth
                .iter()
                .zip(&pred)
                .filter(|(t, p)| t == p)
                .count() as f64
                / truth.len() as f64;
            assert!((ba - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_order_permutation_invariance() {
        let mut rng = SplitMix64::new(9);
        let truth: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let pred: Vec<usize> = (0..60).map(|_| rng.next_index(3)).collect();
        let ba = balanced_accuracy_idx(&truth, &pred, 3).unwrap();
        let mut order: Vec<usize> = (0..60).collect();
        rng.shuffle(&mut order);
        let t2: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        let p2: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
        assert_eq!(ba, balanced_accuracy_idx(&t2, &p2, 3).unwrap());
    }

    #[test]
    fn string_labels_validated_against_taxa() {
        let taxa = strings(&["a", "b"]);
        let truth = strings(&["a", "b", "a"]);
        let pred = strings(&["a", "b", "b"]);
        assert!(balanced_accuracy(&truth, &pred, &taxa).is_ok());
        let bad = strings(&["a", "zzz", "a"]);
        assert!(balanced_accuracy(&bad, &pred, &taxa).is_err());
    }

    #[test]
    fn confusion_diagonal_for_perfect_predictions() {
        let taxa = strings(&["a", "b", "c"]);
        let labels = strings(&["a", "b", "c", "a"]);
        let cm = confusion(&labels, &labels, &taxa).unwrap();
        assert_eq!(cm.errors(), 0);
        assert_eq!(cm.count(0, 0), 2);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.balanced_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn off_diagonal_counts_errors() {
        let taxa = strings(&["a", "b"]);
        let truth = strings(&["a", "a", "b", "b"]);
        let pred = strings(&["a", "b", "b", "a"]);
        let cm = confusion(&truth, &pred, &taxa).unwrap();
        assert_eq!(cm.errors(), 2);
    }

    #[test]
    fn matrix_metric_equals_label_metric_on_random_sets() {
        let mut rng = SplitMix64::new(55);
        let taxa = strings(&["a", "b", "c", "d"]);
        for _ in 0..1000 {
            let n = 4 + rng.next_index(40);
            // Every taxon appears at least once.
            let mut truth: Vec<usize> = (0..taxa.len()).collect();
            truth.extend((0..n).map(|_| rng.next_index(taxa.len())));
            let pred: Vec<usize> = truth.iter().map(|_| rng.next_index(taxa.len())).collect();
            let from_labels = balanced_accuracy_idx(&truth, &pred, taxa.len()).unwrap();
            let cm = ConfusionMatrix::from_indices(&truth, &pred, &taxa).unwrap();
            let from_matrix = cm.balanced_accuracy().unwrap();
            assert_eq!(from_labels, from_matrix);
        }
    }

    #[test]
    fn row_sums_match_per_taxon_counts() {
        let taxa = strings(&["a", "b"]);
        let truth = strings(&["a", "a", "a", "b"]);
        let pred = strings(&["b", "a", "a", "b"]);
        let cm = confusion(&truth, &pred, &taxa).unwrap();
        assert_eq!(cm.row_sum(0), 3);
        assert_eq!(cm.row_sum(1), 1);
    }

    #[test]
    fn entry_statistics_must_match_draws() {
        let entry = EvalEntry::from_draws(
            "generic".into(),
            HeadKind::Linear,
            5,
            "P5".into(),
            "P5".into(),
            vec![0.8, 0.9, 0.85],
        )
        .unwrap();
        assert!(entry.validate().is_ok());
        let mut broken = entry;
        broken.mean += 0.01;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn entry_rejects_out_of_range_draws() {
        assert!(EvalEntry::from_draws(
            "generic".into(),
            HeadKind::Linear,
            1,
            "P5".into(),
            "P5".into(),
            vec![1.2],
        )
        .is_err());
    }

    fn entry(source: &str, head: HeadKind, k: usize, test: &str, mean: f64) -> EvalEntry {
        EvalEntry::from_draws(
            source.into(),
            head,
            k,
            "P5".into(),
            test.into(),
            vec![mean],
        )
        .unwrap()
    }

    #[test]
    fn shift_table_matches_published_layout() {
        // Format fixture shaped like the published cross-instrument table:
        // rows {generic, ssl_refined} x columns {same, shifted}. The means
        // are illustrative report values, not reproduced measurements.
        let report = EvalReport {
            master_seed: 0,
            entries: vec![
                entry("generic", HeadKind::Linear, 25, "P5", 0.899),
                entry("generic", HeadKind::Linear, 25, "P4", 0.755),
                entry("ssl_refined", HeadKind::Linear, 25, "P5", 0.904),
                entry("ssl_refined", HeadKind::Linear, 25, "P4", 0.790),
            ],
        };
        let rows = shift_comparison(&report).unwrap();
        assert_eq!(rows.len(), 2);
        let generic = rows.iter().find(|r| r.feature_source == "generic").unwrap();
        let refined = rows.iter().find(|r| r.feature_source == "ssl_refined").unwrap();
        assert!((generic.same_mean - 0.899).abs() < 1e-12);
        assert!((generic.shifted_mean - 0.755).abs() < 1e-12);
        assert!((generic.drop - 0.144).abs() < 1e-12);
        assert!((refined.same_mean - 0.904).abs() < 1e-12);
        assert!((refined.shifted_mean - 0.790).abs() < 1e-12);
        assert!((refined.drop - 0.114).abs() < 1e-12);
        assert!(refined.drop < generic.drop);
    }

    #[test]
    fn identical_same_and_shifted_means_give_zero_drop() {
        let report = EvalReport {
            master_seed: 0,
            entries: vec![
                entry("generic", HeadKind::Prototype, 1, "P5", 0.5),
                entry("generic", HeadKind::Prototype, 1, "P4", 0.5),
            ],
        };
        let rows = shift_comparison(&report).unwrap();
        assert_eq!(rows[0].drop, 0.0);
    }

    #[test]
    fn missing_pair_is_an_error() {
        let report = EvalReport {
            master_seed: 0,
            entries: vec![entry("generic", HeadKind::Linear, 1, "P5", 0.9)],
        };
        assert!(shift_comparison(&report).is_err());
    }
}
