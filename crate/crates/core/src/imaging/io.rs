//! Image file I/O: binary PGM (P5) and grayscale PNG.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{ParticleImage, DEFAULT_PIXEL_PITCH_UM, IMAGE_SIDE};

/// Load an 8- or 16-bit single-channel image (PGM P5 or grayscale PNG).
///
/// Intensities are scaled to [0, 1]. Inputs that are not 200×200 are
/// center-cropped (larger) or zero-padded (smaller) per axis. Multi-channel
/// files are rejected.
pub fn load_image(path: &Path) -> Result<ParticleImage> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    let (pixels, w, h) = if bytes.starts_with(b"P5") {
        decode_pgm(&bytes, path)?
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes, path)?
    } else {
        return Err(Error::Image(format!(
            "{}: unrecognized format (expected binary PGM or PNG)",
            path.display()
        )));
    };

    let fitted = fit_to_side(&pixels, w, h);
    ParticleImage::new(
        fitted,
        DEFAULT_PIXEL_PITCH_UM,
        path.to_string_lossy().into_owned(),
    )
}

/// Write an image as binary PGM (P5), 8-bit.
pub fn save_pgm(path: &Path, image: &ParticleImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{} {}\n255\n", IMAGE_SIDE, IMAGE_SIDE).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = image.pixels().iter().map(|&p| quantize8(p)).collect();
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Write an image as 8-bit grayscale PNG.
pub fn save_png(path: &Path, image: &ParticleImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), IMAGE_SIDE as u32, IMAGE_SIDE as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let bytes: Vec<u8> = image.pixels().iter().map(|&p| quantize8(p)).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[inline]
fn quantize8(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut pos = 2; // past "P5"
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = next_pgm_int(bytes, &mut pos, path)?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("{}: zero image dimension", path.display())));
    }
    if maxval == 0 || maxval > 65_535 {
        return Err(Error::Image(format!(
            "{}: unsupported PGM maxval {maxval}",
            path.display()
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = w * h;
    let max = maxval as f32;
    let pixels = if maxval < 256 {
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Image(format!("{}: truncated PGM raster", path.display())))?;
        raster.iter().map(|&b| b as f32 / max).collect()
    } else {
        // 16-bit PGM rasters are big-endian.
        let raster = bytes
            .get(pos..pos + 2 * n)
            .ok_or_else(|| Error::Image(format!("{}: truncated PGM raster", path.display())))?;
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / max)
            .collect()
    };
    Ok((pixels, w, h))
}

fn next_pgm_int(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<usize> {
    // Skip whitespace and '#' comment lines.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => {
                return Err(Error::Image(format!(
                    "{}: truncated PGM header",
                    path.display()
                )))
            }
        }
    }
    let start = *pos;
    while matches!(bytes.get(*pos), Some(b) if b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Image(format!(
            "{}: malformed PGM header",
            path.display()
        )));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Image(format!("{}: malformed PGM header", path.display())))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Image(format!(
            "{}: single-channel required, got {:?}",
            path.display(),
            info.color_type
        )));
    }
    let w = info.width as usize;
    let h = info.height as usize;
    let pixels = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65_535.0)
            .collect(),
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported bit depth {other:?}",
                path.display()
            )))
        }
    };
    Ok((pixels, w, h))
}

/// Center-crop or zero-pad a w×h grid to IMAGE_SIDE×IMAGE_SIDE, per axis.
fn fit_to_side(pixels: &[f32], w: usize, h: usize) -> Vec<f32> {
    let side = IMAGE_SIDE;
    let mut out = vec![0.0f32; side * side];
    // Source offset when cropping, destination offset when padding.
    let (src_x0, dst_x0, copy_w) = if w >= side {
        ((w - side) / 2, 0, side)
    } else {
        (0, (side - w) / 2, w)
    };
    let (src_y0, dst_y0, copy_h) = if h >= side {
        ((h - side) / 2, 0, side)
    } else {
        (0, (side - h) / 2, h)
    };
    for row in 0..copy_h {
        let src = (src_y0 + row) * w + src_x0;
        let dst = (dst_y0 + row) * side + dst_x0;
        out[dst..dst + copy_w].copy_from_slice(&pixels[src..src + copy_w]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tempdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn pgm_roundtrip_quantized() {
        let dir = tempdir();
        let path = dir.path().join("img.pgm");
        let px: Vec<f32> = (0..IMAGE_SIDE * IMAGE_SIDE)
            .map(|i| (i % 256) as f32 / 255.0)
            .collect();
        let img = ParticleImage::new(px, 0.595, "t").unwrap();
        save_pgm(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        // 8-bit values survive the roundtrip exactly.
        assert!(img.pixels_equal(&back));
    }

    #[test]
    fn loaded_intensities_within_unit_interval() {
        let dir = tempdir();
        let path = dir.path().join("img.pgm");
        let img = ParticleImage::constant(1.0, "t").unwrap();
        save_pgm(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(back.pixels().iter().fold(0.0f32, |m, &p| m.max(p)) <= 1.0);
    }

    #[test]
    fn small_input_is_zero_padded() {
        let dir = tempdir();
        let path = dir.path().join("small.pgm");
        let mut bytes = b"P5\n100 100\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(200u8, 100 * 100));
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        // Outer border is exactly zero; the centered 100x100 block is not.
        for i in 0..IMAGE_SIDE {
            assert_eq!(img.get(0, i), 0.0);
            assert_eq!(img.get(IMAGE_SIDE - 1, i), 0.0);
            assert_eq!(img.get(i, 0), 0.0);
            assert_eq!(img.get(i, IMAGE_SIDE - 1), 0.0);
        }
        assert!(img.get(100, 100) > 0.7);
        // Padding offset: (200-100)/2 = 50 on each side.
        assert_eq!(img.get(49, 100), 0.0);
        assert!(img.get(50, 100) > 0.7);
    }

    #[test]
    fn large_input_is_center_cropped() {
        let dir = tempdir();
        let path = dir.path().join("big.pgm");
        let (w, h) = (300usize, 250usize);
        // Gradient so the crop window is identifiable.
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend((0..w * h).map(|i| ((i / w) % 256) as u8));
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        // Row 0 of the crop corresponds to source row (250-200)/2 = 25.
        assert!((img.get(0, 0) - 25.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn rgb_png_rejected() {
        let dir = tempdir();
        let path = dir.path().join("rgb.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 4, 4);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(&[128u8; 4 * 4 * 3]).unwrap();
        drop(writer);
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("single-channel required"), "{err}");
    }

    #[test]
    fn png_grayscale_roundtrip() {
        let dir = tempdir();
        let path = dir.path().join("img.png");
        let px: Vec<f32> = (0..IMAGE_SIDE * IMAGE_SIDE)
            .map(|i| ((i * 7) % 256) as f32 / 255.0)
            .collect();
        let img = ParticleImage::new(px, 0.595, "t").unwrap();
        save_png(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.pixels_equal(&back));
    }

    #[test]
    fn sixteen_bit_pgm_scales_to_unit() {
        let dir = tempdir();
        let path = dir.path().join("img16.pgm");
        let mut bytes = format!("P5\n{s} {s}\n65535\n", s = IMAGE_SIDE).into_bytes();
        for i in 0..IMAGE_SIDE * IMAGE_SIDE {
            let v = (i % 65_536) as u16;
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert!(img.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = load_image(Path::new("/nonexistent/file.pgm")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn garbage_bytes_rejected() {
        let dir = tempdir();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not an image").unwrap();
        assert!(load_image(&path).is_err());
    }
}
