//! Stochastic augmentations that produce contrastive views.
//!
//! A single [`augment`] call applies, in order: random rotation (bilinear,
//! reflect padding), random area crop resized back to full resolution,
//! optional horizontal flip, Gaussian blur, and multiplicative gain jitter
//! followed by a clamp to [0, 1]. Every step is a convex combination of
//! input pixels or a clamped rescale, so outputs always satisfy the image
//! invariants. All draws come from one seeded stream, making the operation a
//! pure function of (image, policy, seed).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ParticleImage, IMAGE_SIDE};
use crate::rng::{derive_seed, SplitMix64};

/// Parameters of the augmentation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Rotation angle is drawn uniformly from ±this many degrees.
    pub rotation_max_deg: f64,
    /// Area scale of the random crop, (lo, hi) within (0, 1].
    pub crop_scale_range: (f64, f64),
    /// Gaussian blur sigma in pixels, (lo, hi) ≥ 0.
    pub blur_sigma_range: (f64, f64),
    /// Multiplicative intensity jitter, (lo, hi) with lo ≤ 1 ≤ hi.
    pub gain_jitter_range: (f64, f64),
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotation_max_deg: 180.0,
            crop_scale_range: (0.6, 1.0),
            blur_sigma_range: (0.0, 1.5),
            gain_jitter_range: (0.8, 1.25),
            flip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Policy whose augmentation chain is the identity map, bit-exact.
    pub fn identity() -> Self {
        Self {
            rotation_max_deg: 0.0,
            crop_scale_range: (1.0, 1.0),
            blur_sigma_range: (0.0, 0.0),
            gain_jitter_range: (1.0, 1.0),
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self;
        if !(0.0..=180.0).contains(&p.rotation_max_deg) {
            return Err(Error::InvalidSpec(format!(
                "rotation_max_deg must be in [0,180], got {}",
                p.rotation_max_deg
            )));
        }
        let (clo, chi) = p.crop_scale_range;
        if !(clo > 0.0 && clo <= chi && chi <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({clo}, {chi})"
            )));
        }
        let (blo, bhi) = p.blur_sigma_range;
        if !(blo >= 0.0 && blo <= bhi) {
            return Err(Error::InvalidSpec(format!(
                "blur_sigma_range must satisfy 0 <= lo <= hi, got ({blo}, {bhi})"
            )));
        }
        let (glo, ghi) = p.gain_jitter_range;
        if !(glo > 0.0 && glo <= 1.0 && 1.0 <= ghi) {
            return Err(Error::InvalidSpec(format!(
                "gain_jitter_range must satisfy 0 < lo <= 1 <= hi, got ({glo}, {ghi})"
            )));
        }
        if !(0.0..=1.0).contains(&p.flip_prob) {
            return Err(Error::InvalidSpec(format!(
                "flip_prob must be in [0,1], got {}",
                p.flip_prob
            )));
        }
        Ok(())
    }
}

/// Apply one random augmentation chain. Deterministic per (image, policy, seed).
pub fn augment(image: &ParticleImage, policy: &AugmentPolicy, seed: u64) -> Result<ParticleImage> {
    policy.validate()?;
    let mut rng = SplitMix64::new(seed);

    // All draws happen up front in a fixed order so the stream layout does
    // not depend on which steps turn out to be no-ops.
    let angle_deg = rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg);
    let crop_scale = rng.uniform(policy.crop_scale_range.0, policy.crop_scale_range.1);
    let crop_fx = rng.next_f64();
    let crop_fy = rng.next_f64();
    let flip_draw = rng.next_f64();
    let sigma = rng.uniform(policy.blur_sigma_range.0, policy.blur_sigma_range.1);
    let gain = rng.uniform(policy.gain_jitter_range.0, policy.gain_jitter_range.1);

    let side = IMAGE_SIDE;
    let mut pixels: Vec<f32> = image.pixels().to_vec();

    if angle_deg != 0.0 {
        pixels = rotate_bilinear_reflect(&pixels, side, angle_deg.to_radians());
    }

    let crop_side = ((side as f64) * crop_scale.sqrt()).round().max(1.0) as usize;
    let crop_side = crop_side.min(side);
    if crop_side != side {
        let x0 = (crop_fx * (side - crop_side) as f64).round() as usize;
        let y0 = (crop_fy * (side - crop_side) as f64).round() as usize;
        pixels = crop_resize_bilinear(&pixels, side, x0, y0, crop_side);
    }

    if flip_draw < policy.flip_prob {
        flip_horizontal(&mut pixels, side);
    }

    if sigma > 0.0 {
        pixels = gaussian_blur_reflect(&pixels, side, sigma);
    }

    if gain != 1.0 {
        for p in pixels.iter_mut() {
            *p = (*p * gain as f32).clamp(0.0, 1.0);
        }
    }

    ParticleImage::new(pixels, image.pixel_pitch_um, image.source_id.clone())
}

/// Two independently augmented views of one image, from sub-seeds derived
/// from `seed`. The positive pair for contrastive training.
pub fn make_view_pair(
    image: &ParticleImage,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<(ParticleImage, ParticleImage)> {
    let a = augment(image, policy, derive_seed(seed, "view-a"))?;
    let b = augment(image, policy, derive_seed(seed, "view-b"))?;
    Ok((a, b))
}

/// Reflect a continuous coordinate into [0, n-1] without repeating the edge
/// sample (period 2(n-1)).
#[inline]
fn reflect_coord(x: f64, n: usize) -> f64 {
    let period = 2.0 * (n as f64 - 1.0);
    let mut m = x.rem_euclid(period);
    if m > n as f64 - 1.0 {
        m = period - m;
    }
    m
}

/// Reflect an integer index into [0, n-1], same convention.
#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[inline]
fn sample_bilinear(pixels: &[f32], side: usize, sx: f64, sy: f64) -> f32 {
    let sx = reflect_coord(sx, side);
    let sy = reflect_coord(sy, side);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(side - 1);
    let y1 = (y0 + 1).min(side - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let p00 = pixels[y0 * side + x0] as f64;
    let p01 = pixels[y0 * side + x1] as f64;
    let p10 = pixels[y1 * side + x0] as f64;
    let p11 = pixels[y1 * side + x1] as f64;
    let top = p00 + (p01 - p00) * fx;
    let bot = p10 + (p11 - p10) * fx;
    (top + (bot - top) * fy) as f32
}

fn rotate_bilinear_reflect(pixels: &[f32], side: usize, angle_rad: f64) -> Vec<f32> {
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_rad.sin_cos();
    let mut out = vec![0.0f32; side * side];
    for y in 0..side {
        let dy = y as f64 - c;
        for x in 0..side {
            let dx = x as f64 - c;
            let sx = c + cos * dx + sin * dy;
            let sy = c - sin * dx + cos * dy;
            out[y * side + x] = sample_bilinear(pixels, side, sx, sy);
        }
    }
    out
}

/// Crop the square window at (x0, y0) with side `crop_side` and resize it
/// back to the full side with bilinear interpolation.
fn crop_resize_bilinear(
    pixels: &[f32],
    side: usize,
    x0: usize,
    y0: usize,
    crop_side: usize,
) -> Vec<f32> {
    let ratio = crop_side as f64 / side as f64;
    let mut out = vec![0.0f32; side * side];
    for y in 0..side {
        let sy = y0 as f64 + (y as f64 + 0.5) * ratio - 0.5;
        for x in 0..side {
            let sx = x0 as f64 + (x as f64 + 0.5) * ratio - 0.5;
            out[y * side + x] = sample_bilinear(pixels, side, sx, sy);
        }
    }
    out
}

fn flip_horizontal(pixels: &mut [f32], side: usize) {
    for row in pixels.chunks_exact_mut(side) {
        row.reverse();
    }
}

fn gaussian_blur_reflect(pixels: &[f32], side: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let inv = -0.5 / (sigma * sigma);
    for d in -(radius as isize)..=(radius as isize) {
        kernel.push(((d * d) as f64 * inv).exp());
    }
    let total: f64 = kernel.iter().sum();
    for w in kernel.iter_mut() {
        *w /= total;
    }

    // Horizontal pass, then vertical.
    let mut tmp = vec![0.0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0f64;
            for (ki, w) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + ki as isize - radius as isize, side);
                acc += w * pixels[y * side + sx] as f64;
            }
            tmp[y * side + x] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0f64;
            for (ki, w) in kernel.iter().enumerate() {
                let sy = reflect_index(y as isize + ki as isize - radius as isize, side);
                acc += w * tmp[sy * side + x] as f64;
            }
            out[y * side + x] = acc as f32;
        }
    }
    out
}
