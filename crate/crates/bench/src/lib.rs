//! Shared helpers for the pipeline benchmarks.

use holoshot_core::imaging::{ParticleImage, IMAGE_SIDE};
use holoshot_core::rng::SplitMix64;

/// Deterministic noise image for benchmark inputs.
pub fn noise_image(seed: u64) -> ParticleImage {
    let mut rng = SplitMix64::new(seed);
    let px: Vec<f32> = (0..IMAGE_SIDE * IMAGE_SIDE)
        .map(|_| rng.next_f64() as f32)
        .collect();
    ParticleImage::new(px, 0.595, format!("bench-{seed}")).unwrap()
}

/// Deterministic unit-norm rows for loss benchmarks, interleaved view pairs.
pub fn unit_rows(n_items: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut rows = Vec::with_capacity(2 * n_items * dim);
    for _ in 0..2 * n_items {
        let raw: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        rows.extend(raw.iter().map(|v| v / norm));
    }
    rows
}
