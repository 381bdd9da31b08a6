//! One-vs-all logistic regression on frozen embeddings.
//!
//! Each taxon gets an independent binary classifier (taxon vs rest) trained
//! by full-batch gradient descent with Armijo backtracking on the
//! L2-regularized binary cross-entropy. The regularizer keeps the always-
//! separable small-k problems bounded; the bias is left unregularized.

use crate::error::{Error, Result};
use crate::fewshot::ClassifierHead;

/// Optimization settings for [`fit_linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFitConfig {
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub max_iter: usize,
    /// Stop when the gradient norm falls below this.
    pub tol: f64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

/// Per-taxon binary linear classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub taxa: Vec<String>,
    pub feature_dim: usize,
    /// One weight vector per taxon.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl ClassifierHead for LinearHead {
    fn taxa(&self) -> &[String] {
        &self.taxa
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Sigmoid of the per-taxon logit; argmax is unaffected by the sigmoid,
    /// scores stay interpretable as one-vs-rest probabilities.
    fn score(&self, embedding: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| {
                let z = b + w.iter().zip(embedding).map(|(wi, xi)| wi * xi).sum::<f64>();
                sigmoid(z)
            })
            .collect()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^z).
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Regularized objective and gradient for one binary problem.
/// J = mean_i softplus(z_i) - y_i z_i + (l2/2)||w||^2, z = w·x + b.
pub fn logistic_objective(
    weights: &[f64],
    bias: f64,
    embeddings: &[Vec<f64>],
    targets: &[f64],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let m = embeddings.len() as f64;
    let dim = weights.len();
    let mut loss = 0.0f64;
    let mut grad_w = vec![0.0f64; dim];
    let mut grad_b = 0.0f64;
    for (x, &y) in embeddings.iter().zip(targets) {
        let z = bias + weights.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        loss += softplus(z) - y * z;
        let delta = sigmoid(z) - y;
        grad_b += delta;
        for (g, xi) in grad_w.iter_mut().zip(x) {
            *g += delta * xi;
        }
    }
    loss /= m;
    grad_b /= m;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / m + l2 * w;
    }
    let penalty = 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss + penalty, grad_w, grad_b)
}

/// Fit one-vs-all logistic classifiers. Deterministic (no randomness: zero
/// init, full-batch descent with backtracking until the gradient norm drops
/// below `tol` or `max_iter` is reached).
pub fn fit_linear(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    taxa: &[String],
    cfg: &LinearFitConfig,
) -> Result<LinearHead> {
    if taxa.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "one-vs-all fitting needs at least 2 taxa, got {}",
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
    for (c, taxon) in taxa.iter().enumerate() {
        if !labels.contains(&c) {
            return Err(Error::InsufficientData(format!(
                "taxon '{taxon}' has no support examples"
            )));
        }
    }
    if !(cfg.l2 >= 0.0 && cfg.tol > 0.0) {
        return Err(Error::InvalidSpec("l2 must be >= 0 and tol > 0".into()));
    }

    let mut weights = Vec::with_capacity(taxa.len());
    let mut biases = Vec::with_capacity(taxa.len());
    for class in 0..taxa.len() {
        let targets: Vec<f64> = labels
            .iter()
            .map(|&l| if l == class { 1.0 } else { 0.0 })
            .collect();
        let (w, b) = descend(embeddings, &targets, dim, cfg);
        weights.push(w);
        biases.push(b);
    }

    Ok(LinearHead {
        taxa: taxa.to_vec(),
        feature_dim: dim,
        weights,
        biases,
    })
}

/// Full-batch gradient descent with Armijo backtracking. The objective is
/// convex, so accepted steps are monotonically non-increasing.
fn descend(embeddings: &[Vec<f64>], targets: &[f64], dim: usize, cfg: &LinearFitConfig) -> (Vec<f64>, f64) {
    const ARMIJO_C: f64 = 1e-4;
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut step = 1.0f64;

    let (mut value, mut grad_w, mut grad_b) = logistic_objective(&w, b, embeddings, targets, cfg.l2);
    for _ in 0..cfg.max_iter {
        let grad_sq = grad_b * grad_b + grad_w.iter().map(|g| g * g).sum::<f64>();
        if grad_sq.sqrt() < cfg.tol {
            break;
        }
        // Backtrack from twice the previously accepted step.
        let mut eta = (step * 2.0).min(1e6);
        let mut accepted = false;
        while eta > 1e-18 {
            let w_try: Vec<f64> = w.iter().zip(&grad_w).map(|(wi, gi)| wi - eta * gi).collect();
            let b_try = b - eta * grad_b;
            let (v_try, gw_try, gb_try) =
                logistic_objective(&w_try, b_try, embeddings, targets, cfg.l2);
            if v_try <= value - ARMIJO_C * eta * grad_sq {
                w = w_try;
                b = b_try;
                value = v_try;
                grad_w = gw_try;
                grad_b = gb_try;
                step = eta;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn taxa(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn antipodal_points_are_separated() {
        let embeddings = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let labels = vec![0usize, 1];
        let head = fit_linear(&embeddings, &labels, &taxa(&["a", "b"]), &Default::default()).unwrap();
        let (pred, scores) = head.predict(&embeddings).unwrap();
        assert_eq!(pred, labels);
        // Exhaustive sign check of the decision boundary: any x1 > 0 goes to
        // class a, any x1 < 0 to class b.
        for x in [0.1f64, 0.5, 2.0, 7.0] {
            let (p, _) = head.predict(&[vec![x, 0.3], vec![-x, -0.2]]).unwrap();
            assert_eq!(p, vec![0, 1], "x={x}");
        }
        assert!(scores[0][0] > scores[0][1]);
    }

    #[test]
    fn zero_embeddings_predict_via_bias_alone() {
        let embeddings = vec![vec![0.0, 0.0]; 6];
        let labels = vec![0, 0, 0, 1, 1, 2];
        let head = fit_linear(&embeddings, &labels, &taxa(&["a", "b", "c"]), &Default::default()).unwrap();
        let (_, scores) = head
            .predict(&[vec![0.0, 0.0], vec![3.0, -4.0], vec![-1.0, 9.0]])
            .unwrap();
        // No feature signal: scores are constant across inputs.
        assert_eq!(scores[0], scores[1]);
        assert_eq!(scores[0], scores[2]);
    }

    #[test]
    fn duplicating_support_preserves_argmax() {
        let mut rng = SplitMix64::new(8);
        let embeddings: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let names = taxa(&["a", "b", "c"]);
        let head = fit_linear(&embeddings, &labels, &names, &Default::default()).unwrap();

        let mut doubled = embeddings.clone();
        doubled.extend(embeddings.iter().cloned());
        let mut doubled_labels = labels.clone();
        doubled_labels.extend(labels.iter().cloned());
        let head2 = fit_linear(&doubled, &doubled_labels, &names, &Default::default()).unwrap();

        let probes: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let (p1, _) = head.predict(&probes).unwrap();
        let (p2, _) = head2.predict(&probes).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn objective_never_increases_along_descent() {
        // Track the objective across iterations by re-running with
        // increasing max_iter; each prefix value must dominate the next.
        let mut rng = SplitMix64::new(12);
        let embeddings: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let targets: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let l2 = 1e-3;
        let mut last = f64::INFINITY;
        for iters in [0usize, 1, 2, 5, 10, 50, 200] {
            let cfg = LinearFitConfig { l2, max_iter: iters, tol: 1e-12 };
            let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
            let head = fit_linear(&embeddings, &labels, &taxa(&["a", "b"]), &cfg).unwrap();
            let (v, _, _) = logistic_objective(&head.weights[1], head.biases[1], &embeddings, &targets, l2);
            assert!(v <= last + 1e-12, "objective rose: {last} -> {v} at {iters} iters");
            last = v;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(5);
        let dim = 5;
        let embeddings: Vec<Vec<f64>> = (0..15)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect();
        let targets: Vec<f64> = (0..15).map(|i| ((i * 7) % 2) as f64).collect();
        let w: Vec<f64> = (0..dim).map(|_| 0.3 * rng.normal()).collect();
        let b = 0.1;
        let l2 = 1e-2;
        let (_, gw, gb) = logistic_objective(&w, b, &embeddings, &targets, l2);

        let eps = 1e-6;
        for i in 0..dim {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let (vp, _, _) = logistic_objective(&wp, b, &embeddings, &targets, l2);
            let (vm, _, _) = logistic_objective(&wm, b, &embeddings, &targets, l2);
            let numeric = (vp - vm) / (2.0 * eps);
            let denom = numeric.abs().max(gw[i].abs()).max(1e-8);
            assert!((numeric - gw[i]).abs() / denom < 1e-4);
        }
        let (vp, _, _) = logistic_objective(&w, b + eps, &embeddings, &targets, l2);
        let (vm, _, _) = logistic_objective(&w, b - eps, &embeddings, &targets, l2);
        let numeric = (vp - vm) / (2.0 * eps);
        let denom = numeric.abs().max(gb.abs()).max(1e-8);
        assert!((numeric - gb).abs() / denom < 1e-4);
    }

    #[test]
    fn non_finite_embeddings_rejected() {
        let embeddings = vec![vec![1.0, f64::NAN], vec![0.0, 1.0]];
        let labels = vec![0, 1];
        assert!(fit_linear(&embeddings, &labels, &taxa(&["a", "b"]), &Default::default()).is_err());
    }

    #[test]
    fn missing_taxon_support_rejected() {
        let embeddings = vec![vec![1.0], vec![2.0]];
        let labels = vec![0, 0];
        assert!(fit_linear(&embeddings, &labels, &taxa(&["a", "b"]), &Default::default()).is_err());
    }

    #[test]
    fn dimension_mismatch_on_predict() {
        let embeddings = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let labels = vec![0, 1];
        let head = fit_linear(&embeddings, &labels, &taxa(&["a", "b"]), &Default::default()).unwrap();
        assert!(head.predict(&[vec![1.0, 2.0, 3.0]]).is_err());
    }
}
