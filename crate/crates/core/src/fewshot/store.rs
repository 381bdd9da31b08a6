//! Binary container for fitted heads (magic "BHEAD1"): head kind, taxa
//! order, then parameter tensors as little-endian f32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fewshot::{LinearHead, PrototypeHead};

const HEAD_MAGIC: &[u8; 6] = b"BHEAD1";

/// A head ready for serialization or just loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredHead {
    Linear(LinearHead),
    Prototype(PrototypeHead),
}

/// Write a head container atomically (temp file + rename).
pub fn save_head(path: &Path, head: &StoredHead) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(HEAD_MAGIC);
    match head {
        StoredHead::Linear(h) => {
            bytes.push(0u8);
            write_taxa(&mut bytes, &h.taxa)?;
            bytes.extend_from_slice(&(h.feature_dim as u32).to_le_bytes());
            for (w, b) in h.weights.iter().zip(&h.biases) {
                for &v in w {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
                bytes.extend_from_slice(&(*b as f32).to_le_bytes());
            }
        }
        StoredHead::Prototype(h) => {
            bytes.push(1u8);
            write_taxa(&mut bytes, &h.taxa)?;
            bytes.extend_from_slice(&(h.feature_dim as u32).to_le_bytes());
            bytes.extend_from_slice(&(h.scale as f32).to_le_bytes());
            for p in &h.prototypes {
                for &v in p {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    let tmp = path.with_extension("head.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load a head container written by [`save_head`].
pub fn load_head(path: &Path) -> Result<StoredHead> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let magic = r.take(6)?;
    if magic != HEAD_MAGIC {
        return Err(Error::Integrity(format!(
            "{}: not a BHEAD1 container",
            path.display()
        )));
    }
    let kind = r.take(1)?[0];
    let n_taxa = r.u32()? as usize;
    let mut taxa = Vec::with_capacity(n_taxa);
    for _ in 0..n_taxa {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        let s = std::str::from_utf8(raw)
            .map_err(|_| Error::Integrity(format!("{}: non-UTF8 taxon", path.display())))?;
        taxa.push(s.to_string());
    }
    let feature_dim = r.u32()? as usize;
    match kind {
        0 => {
            let mut weights = Vec::with_capacity(n_taxa);
            let mut biases = Vec::with_capacity(n_taxa);
            for _ in 0..n_taxa {
                let mut w = Vec::with_capacity(feature_dim);
                for _ in 0..feature_dim {
                    w.push(r.f32()? as f64);
                }
                weights.push(w);
                biases.push(r.f32()? as f64);
            }
            r.finish()?;
            Ok(StoredHead::Linear(LinearHead {
                taxa,
                feature_dim,
                weights,
                biases,
            }))
        }
        1 => {
            let scale = r.f32()? as f64;
            let mut prototypes = Vec::with_capacity(n_taxa);
            for _ in 0..n_taxa {
                let mut p = Vec::with_capacity(feature_dim);
                for _ in 0..feature_dim {
                    p.push(r.f32()? as f64);
                }
                prototypes.push(p);
            }
            r.finish()?;
            Ok(StoredHead::Prototype(PrototypeHead {
                taxa,
                feature_dim,
                prototypes,
                scale,
            }))
        }
        other => Err(Error::Integrity(format!(
            "{}: unknown head kind {other}",
            path.display()
        ))),
    }
}

fn write_taxa(bytes: &mut Vec<u8>, taxa: &[String]) -> Result<()> {
    bytes.extend_from_slice(&(taxa.len() as u32).to_le_bytes());
    for t in taxa {
        if t.is_empty() {
            return Err(Error::InvalidSpec("empty taxon name in head".into()));
        }
        bytes.extend_from_slice(&(t.len() as u32).to_le_bytes());
        bytes.extend_from_slice(t.as_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| {
            Error::Integrity(format!("{}: truncated container", self.path.display()))
        })?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Integrity(format!(
                "{}: {} trailing bytes",
                self.path.display(),
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_head_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.head");
        let head = StoredHead::Linear(LinearHead {
            taxa: vec!["a".into(), "b".into()],
            feature_dim: 3,
            weights: vec![vec![0.25, -0.5, 1.0], vec![0.0, 2.0, -0.125]],
            biases: vec![0.5, -1.0],
        });
        save_head(&path, &head).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_head(&path).unwrap();
        save_head(&path, &loaded).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
        assert_eq!(head, loaded);
    }

    #[test]
    fn prototype_head_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.head");
        let head = StoredHead::Prototype(PrototypeHead {
            taxa: vec!["x".into(), "y".into(), "z".into()],
            feature_dim: 2,
            prototypes: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            scale: 10.0,
        });
        save_head(&path, &head).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_head(&path).unwrap();
        save_head(&path, &loaded).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        assert_eq!(head, loaded);
    }

    #[test]
    fn corrupt_container_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.head");
        std::fs::write(&path, b"BHEAD1\x07").unwrap();
        assert!(load_head(&path).is_err());
        std::fs::write(&path, b"NOTAHEAD").unwrap();
        assert!(load_head(&path).is_err());
    }
}
