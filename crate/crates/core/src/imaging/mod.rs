//! Image representation, dataset manifests, synthetic oracle data, and the
//! stochastic augmentation pipeline.

mod augment;
mod io;
mod synth;

pub use augment::{augment, make_view_pair, AugmentPolicy};
pub use io::{load_image, save_pgm, save_png};
pub use synth::{generate_synthetic, ClassShape, ShiftParams, SyntheticSpec};

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Side length of a pipeline image in pixels.
pub const IMAGE_SIDE: usize = 200;

/// Physical pixel pitch of the instrument's reconstructed images.
pub const DEFAULT_PIXEL_PITCH_UM: f64 = 0.595;

/// A centered single-channel particle image.
///
/// Pixels are stored row-major as intensities in [0, 1]. All pipeline
/// operations consume and produce exactly [`IMAGE_SIDE`]×[`IMAGE_SIDE`]
/// grids; images loaded at other sizes are center-cropped or zero-padded on
/// ingest.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleImage {
    pixels: Vec<f32>,
    pub pixel_pitch_um: f64,
    pub source_id: String,
}

impl ParticleImage {
    /// Build an image from row-major pixels, validating the invariants.
    pub fn new(pixels: Vec<f32>, pixel_pitch_um: f64, source_id: impl Into<String>) -> Result<Self> {
        if pixels.len() != IMAGE_SIDE * IMAGE_SIDE {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{} pixels, got {}",
                IMAGE_SIDE,
                IMAGE_SIDE,
                pixels.len()
            )));
        }
        if !(pixel_pitch_um > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "pixel pitch must be positive, got {pixel_pitch_um}"
            )));
        }
        for (i, &p) in pixels.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidSpec(format!(
                    "intensity out of [0,1] at index {i}: {p}"
                )));
            }
        }
        Ok(Self {
            pixels,
            pixel_pitch_um,
            source_id: source_id.into(),
        })
    }

    /// Constant-intensity image, mainly for tests.
    pub fn constant(value: f32, source_id: impl Into<String>) -> Result<Self> {
        Self::new(
            vec![value; IMAGE_SIDE * IMAGE_SIDE],
            DEFAULT_PIXEL_PITCH_UM,
            source_id,
        )
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * IMAGE_SIDE + x]
    }

    /// Byte-level equality of the pixel grids.
    pub fn pixels_equal(&self, other: &ParticleImage) -> bool {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Dataset split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
    Unlabelled,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unlabelled => "unlabelled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unlabelled" => Ok(Split::Unlabelled),
            other => Err(Error::Parse(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    /// Image location, relative to the manifest's directory.
    pub image_path: String,
    /// Taxon label; empty exactly for unlabelled records.
    pub taxon: String,
    /// Instrument tag, e.g. "P5" or "P4".
    pub instrument: String,
    pub split: Split,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.instrument.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "record '{}' has an empty instrument tag",
                self.image_path
            )));
        }
        let unlabelled = self.split == Split::Unlabelled;
        if self.taxon.is_empty() != unlabelled {
            return Err(Error::InvalidSpec(format!(
                "record '{}': taxon must be empty iff split is unlabelled",
                self.image_path
            )));
        }
        Ok(())
    }
}

const MANIFEST_HEADER: &str = "path,taxon,instrument,split";

/// Write a dataset manifest as UTF-8 CSV with header `path,taxon,instrument,split`.
///
/// Fields containing commas or newlines are rejected; the manifest writer is
/// the only producer of these files and never needs quoting.
pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 48 + 32);
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for rec in records {
        rec.validate()?;
        for field in [&rec.image_path, &rec.taxon, &rec.instrument] {
            if field.contains(',') || field.contains('\n') {
                return Err(Error::Parse(format!(
                    "manifest field '{field}' contains a separator character"
                )));
            }
        }
        out.push_str(&rec.image_path);
        out.push(',');
        out.push_str(&rec.taxon);
        out.push(',');
        out.push_str(&rec.instrument);
        out.push(',');
        out.push_str(rec.split.as_str());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a dataset manifest written by [`write_manifest`].
pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "manifest {}: expected header '{MANIFEST_HEADER}', got {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "manifest {} line {}: expected 4 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let rec = DatasetRecord {
            image_path: fields[0].to_string(),
            taxon: fields[1].to_string(),
            instrument: fields[2].to_string(),
            split: Split::parse(fields[3].trim_end())?,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}
