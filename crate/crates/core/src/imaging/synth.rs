//! Synthetic oracle data: parametric particle renderings with class-specific
//! shape statistics and an optional simulated second instrument.
//!
//! Each class draws particle radius, eccentricity and ring-fringe frequency
//! from its own ranges; instances differ by position, orientation, the drawn
//! shape values and pixel noise. The optional shift perturbation (blur, gain,
//! additive noise) produces a paired copy of every image tagged as coming
//! from a second instrument, emulating mild cross-device variation.

use crate::error::{Error, Result};
use crate::imaging::{DatasetRecord, ParticleImage, Split, DEFAULT_PIXEL_PITCH_UM, IMAGE_SIDE};
use crate::rng::{derive_seed, SplitMix64};

/// Shape statistics for one synthetic class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassShape {
    /// Particle semi-major axis range in pixels.
    pub radius_px: (f64, f64),
    /// Eccentricity range in [0, 1); the minor/major axis ratio is 1 - e.
    pub eccentricity: (f64, f64),
    /// Ring-fringe frequency range, cycles per particle radius.
    pub fringe_freq: (f64, f64),
    /// Additive Gaussian pixel noise sigma.
    pub noise_sigma: f64,
}

impl ClassShape {
    fn validate(&self, idx: usize) -> Result<()> {
        let ranges = [
            ("radius_px", self.radius_px),
            ("eccentricity", self.eccentricity),
            ("fringe_freq", self.fringe_freq),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidSpec(format!(
                    "class {idx}: {name} range ({lo}, {hi}) is not well-ordered"
                )));
            }
        }
        if self.radius_px.0 < 2.0 || self.radius_px.1 > (IMAGE_SIDE / 2 - 10) as f64 {
            return Err(Error::InvalidSpec(format!(
                "class {idx}: radius range {:?} outside the renderable band",
                self.radius_px
            )));
        }
        if self.eccentricity.0 < 0.0 || self.eccentricity.1 >= 1.0 {
            return Err(Error::InvalidSpec(format!(
                "class {idx}: eccentricity range {:?} outside [0, 1)",
                self.eccentricity
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma < 0.5) {
            return Err(Error::InvalidSpec(format!(
                "class {idx}: noise sigma {} outside [0, 0.5)",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Perturbation emulating a second measurement instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftParams {
    pub blur_sigma: f64,
    pub gain: f64,
    pub noise_sigma: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        // Mild optics/exposure drift: visually similar images, measurably
        // different statistics.
        Self {
            blur_sigma: 1.5,
            gain: 1.25,
            noise_sigma: 0.03,
        }
    }
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// Images generated per class (before any shift copies).
    pub per_class_count: usize,
    /// One entry per class.
    pub classes: Vec<ClassShape>,
    /// When set, every image also gets a perturbed copy tagged with
    /// `shift_instrument`.
    pub shift: Option<ShiftParams>,
    /// Fraction of each class assigned to the train split.
    pub train_fraction: f64,
    /// Fraction of each class assigned to the test split; the remainder is
    /// unlabelled.
    pub test_fraction: f64,
    pub base_instrument: String,
    pub shift_instrument: String,
}

impl SyntheticSpec {
    /// Spec with evenly spread class shapes; suitable defaults for up to
    /// eight classes.
    pub fn with_default_classes(n_classes: usize, per_class_count: usize) -> Self {
        let classes = (0..n_classes)
            .map(|i| {
                let fi = i as f64;
                ClassShape {
                    radius_px: (12.0 + 10.0 * fi, 15.0 + 10.0 * fi),
                    eccentricity: if i % 2 == 0 { (0.0, 0.2) } else { (0.3, 0.5) },
                    fringe_freq: (1.6 + 1.3 * fi, 2.1 + 1.3 * fi),
                    noise_sigma: 0.02,
                }
            })
            .collect();
        Self {
            n_classes,
            per_class_count,
            classes,
            shift: None,
            train_fraction: 0.2,
            test_fraction: 0.2,
            base_instrument: "P5".to_string(),
            shift_instrument: "P4".to_string(),
        }
    }

    pub fn taxon_name(&self, class: usize) -> String {
        format!("taxon{class:02}")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.per_class_count < 1 {
            return Err(Error::InvalidSpec("per_class_count must be >= 1".into()));
        }
        if self.classes.len() != self.n_classes {
            return Err(Error::InvalidSpec(format!(
                "expected {} class shapes, got {}",
                self.n_classes,
                self.classes.len()
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            c.validate(i)?;
        }
        if !(0.0..=1.0).contains(&self.train_fraction)
            || !(0.0..=1.0).contains(&self.test_fraction)
            || self.train_fraction + self.test_fraction > 1.0
        {
            return Err(Error::InvalidSpec(format!(
                "split fractions ({}, {}) must be in [0,1] and sum to at most 1",
                self.train_fraction, self.test_fraction
            )));
        }
        if self.base_instrument.is_empty() || self.shift_instrument.is_empty() {
            return Err(Error::InvalidSpec("instrument tags must be non-empty".into()));
        }
        if self.shift.is_some() && self.base_instrument == self.shift_instrument {
            return Err(Error::InvalidSpec(
                "shifted copies need a distinct instrument tag".into(),
            ));
        }
        if let Some(s) = &self.shift {
            if !(s.blur_sigma >= 0.0 && s.gain > 0.0 && s.noise_sigma >= 0.0) {
                return Err(Error::InvalidSpec(format!("invalid shift parameters {s:?}")));
            }
        }
        Ok(())
    }

    /// Per-class record counts (train, test, unlabelled).
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.per_class_count;
        let n_train = (n as f64 * self.train_fraction).floor() as usize;
        let n_test = (n as f64 * self.test_fraction).floor() as usize;
        (n_train, n_test, n - n_train - n_test)
    }
}

/// Generate a synthetic dataset. Deterministic for fixed (spec, seed).
///
/// Produces exactly `n_classes * per_class_count` base images (plus one
/// perturbed copy each when `shift` is set) and errors out if the classes
/// are not separable enough for a raw-pixel nearest-centroid check.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<Vec<(ParticleImage, DatasetRecord)>> {
    spec.validate()?;
    let (n_train, n_test, _) = spec.split_counts();

    let mut rng = SplitMix64::new(derive_seed(seed, "synth"));
    let mut base: Vec<(ParticleImage, DatasetRecord)> = Vec::new();
    let mut class_of: Vec<usize> = Vec::new();

    let mut global = 0usize;
    for class in 0..spec.n_classes {
        let shape = &spec.classes[class];
        for j in 0..spec.per_class_count {
            let image = render_particle(shape, &mut rng, format!("p5/img{global:05}.pgm"));
            let split = if j < n_train {
                Split::Train
            } else if j < n_train + n_test {
                Split::Test
            } else {
                Split::Unlabelled
            };
            let taxon = if split == Split::Unlabelled {
                String::new()
            } else {
                spec.taxon_name(class)
            };
            let record = DatasetRecord {
                image_path: format!("p5/img{global:05}.pgm"),
                taxon,
                instrument: spec.base_instrument.clone(),
                split,
            };
            base.push((image, record));
            class_of.push(class);
            global += 1;
        }
    }

    self_check(spec, &base, &class_of)?;

    let mut out = base;
    if let Some(shift) = &spec.shift {
        let shifted: Vec<(ParticleImage, DatasetRecord)> = out
            .iter()
            .enumerate()
            .map(|(idx, (image, record))| {
                let path = format!("p4/img{idx:05}.pgm");
                let mut rec = record.clone();
                rec.image_path = path.clone();
                rec.instrument = spec.shift_instrument.clone();
                let img = apply_shift(image, shift, derive_seed(seed, &format!("shift:{idx}")), path);
                (img, rec)
            })
            .collect();
        out.extend(shifted);
    }
    Ok(out)
}

/// Apply the instrument-shift perturbation to one image.
pub fn apply_shift(
    image: &ParticleImage,
    shift: &ShiftParams,
    seed: u64,
    source_id: String,
) -> ParticleImage {
    let mut pixels = apply_blur_gain(image, shift);
    if shift.noise_sigma > 0.0 {
        let mut rng = SplitMix64::new(seed);
        for p in pixels.iter_mut() {
            let v = *p as f64 + shift.noise_sigma * rng.normal();
            *p = v.clamp(0.0, 1.0) as f32;
        }
    }
    ParticleImage::new(pixels, image.pixel_pitch_um, source_id)
        .expect("shift output stays within image invariants")
}

fn apply_blur_gain(image: &ParticleImage, shift: &ShiftParams) -> Vec<f32> {
    let side = IMAGE_SIDE;
    let mut px = image.pixels().to_vec();
    if shift.blur_sigma > 0.0 {
        let tmp = ParticleImage::new(px, image.pixel_pitch_um, "tmp".to_string()).unwrap();
        let policy = crate::imaging::AugmentPolicy {
            blur_sigma_range: (shift.blur_sigma, shift.blur_sigma),
            ..crate::imaging::AugmentPolicy::identity()
        };
        px = crate::imaging::augment(&tmp, &policy, 0)
            .expect("blur-only policy is valid")
            .pixels()
            .to_vec();
    }
    if shift.gain != 1.0 {
        for p in px.iter_mut() {
            *p = (*p as f64 * shift.gain).clamp(0.0, 1.0) as f32;
        }
    }
    debug_assert_eq!(px.len(), side * side);
    px
}

/// Render one particle: soft elliptical body plus damped concentric fringes
/// on a mid-gray background.
fn render_particle(shape: &ClassShape, rng: &mut SplitMix64, source_id: String) -> ParticleImage {
    let side = IMAGE_SIDE;
    let c = (side as f64 - 1.0) / 2.0;
    let cx = c + rng.uniform(-3.0, 3.0);
    let cy = c + rng.uniform(-3.0, 3.0);
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let a = rng.uniform(shape.radius_px.0, shape.radius_px.1);
    let q = 1.0 - rng.uniform(shape.eccentricity.0, shape.eccentricity.1);
    let freq = rng.uniform(shape.fringe_freq.0, shape.fringe_freq.1);
    let (sin_t, cos_t) = theta.sin_cos();
    let b = a * q;

    let mut px = vec![0.0f32; side * side];
    for y in 0..side {
        let dy = y as f64 - cy;
        for x in 0..side {
            let dx = x as f64 - cx;
            let u = (cos_t * dx + sin_t * dy) / a;
            let v = (-sin_t * dx + cos_t * dy) / b;
            let d = (u * u + v * v).sqrt();
            let body = 1.0 / (1.0 + (8.0 * (d - 1.0)).exp());
            let ring = (std::f64::consts::TAU * freq * d).cos() * (-0.5 * d).exp();
            let noise = shape.noise_sigma * rng.normal();
            let val = 0.5 - 0.34 * body + 0.18 * ring + noise;
            px[y * side + x] = val.clamp(0.0, 1.0) as f32;
        }
    }
    ParticleImage::new(px, DEFAULT_PIXEL_PITCH_UM, source_id)
        .expect("rendered pixels are clamped")
}

/// Nearest-centroid separability check on raw pixels with leave-one-out
/// class means (an instance never contributes to the mean it is compared
/// against, so single-instance leakage cannot mask identical classes).
/// Requires accuracy above chance by a 0.2 margin.
fn self_check(
    spec: &SyntheticSpec,
    base: &[(ParticleImage, DatasetRecord)],
    class_of: &[usize],
) -> Result<()> {
    let n = spec.n_classes;
    let dim = IMAGE_SIDE * IMAGE_SIDE;
    let mut sums = vec![vec![0.0f64; dim]; n];
    let mut counts = vec![0usize; n];
    for ((img, _), &cls) in base.iter().zip(class_of) {
        counts[cls] += 1;
        let m = &mut sums[cls];
        for (mi, &p) in m.iter_mut().zip(img.pixels()) {
            *mi += p as f64;
        }
    }
    if counts.iter().any(|&c| c < 2) {
        // Leave-one-out needs a remainder; a single instance per class
        // cannot be checked and is accepted as-is.
        return Ok(());
    }
    let mut correct = 0usize;
    for ((img, _), &cls) in base.iter().zip(class_of) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (ci, sum) in sums.iter().enumerate() {
            // Mean excluding this instance from its own class.
            let cnt = if ci == cls { counts[ci] - 1 } else { counts[ci] } as f64;
            let mut d = 0.0f64;
            if ci == cls {
                for (&p, &s) in img.pixels().iter().zip(sum.iter()) {
                    let diff = p as f64 - (s - p as f64) / cnt;
                    d += diff * diff;
                }
            } else {
                for (&p, &s) in img.pixels().iter().zip(sum.iter()) {
                    let diff = p as f64 - s / cnt;
                    d += diff * diff;
                }
            }
            if d < best_d {
                best_d = d;
                best = ci;
            }
        }
        if best == cls {
            correct += 1;
        }
    }
    let acc = correct as f64 / base.len() as f64;
    let floor = 1.0 / n as f64 + 0.2;
    if acc <= floor {
        return Err(Error::InvalidSpec(format!(
            "degenerate synthetic spec: nearest-centroid self-check accuracy {acc:.3} \
             does not exceed {floor:.3}"
        )));
    }
    Ok(())
}
