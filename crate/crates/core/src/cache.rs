//! Persistent embedding cache (magic "BCACHE1") decoupling encoding from
//! evaluation.
//!
//! Header: magic, feature_dim (u32), record count (u64), feature-source tag,
//! checkpoint digest (u64; zero for imported vectors). Each record stores
//! id, instrument, taxon and the f32 vector. Splits are not stored; they are
//! re-attached from the dataset manifest at load time, keeping the cache
//! schema independent of split bookkeeping.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{EmbeddingRecord, EmbeddingTable};
use crate::imaging::DatasetRecord;

const CACHE_MAGIC: &[u8; 7] = b"BCACHE1";

/// Digest value marking caches whose vectors were imported rather than
/// produced by a checkpoint.
pub const IMPORTED_DIGEST: u64 = 0;

/// Records as stored on disk (no split attached yet).
#[derive(Debug, Clone, PartialEq)]
pub struct CachedRecord {
    pub id: String,
    pub instrument: String,
    pub taxon: String,
    pub vector: Vec<f32>,
}

/// Parsed cache file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub feature_source: String,
    pub feature_dim: usize,
    pub checkpoint_digest: u64,
    pub records: Vec<CachedRecord>,
}

/// Write a cache atomically (temp file + rename), so concurrent readers
/// never observe a partial file.
pub fn write_cache(path: &Path, cache: &EmbeddingCache) -> Result<()> {
    if cache.feature_source.is_empty() {
        return Err(Error::InvalidSpec("empty feature source tag".into()));
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&(cache.feature_dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(cache.records.len() as u64).to_le_bytes());
    write_str(&mut bytes, &cache.feature_source);
    bytes.extend_from_slice(&cache.checkpoint_digest.to_le_bytes());
    for r in &cache.records {
        if r.vector.len() != cache.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "record '{}' has dim {}, cache says {}",
                r.id,
                r.vector.len(),
                cache.feature_dim
            )));
        }
        write_str(&mut bytes, &r.id);
        write_str(&mut bytes, &r.instrument);
        write_str(&mut bytes, &r.taxon);
        for &v in &r.vector {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("bcache.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read a cache written by [`write_cache`].
pub fn read_cache(path: &Path) -> Result<EmbeddingCache> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor { bytes: &bytes, pos: 0, path };
    if r.take(7)? != CACHE_MAGIC {
        return Err(Error::Integrity(format!(
            "{}: not a BCACHE1 file",
            path.display()
        )));
    }
    let feature_dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let feature_source = r.string()?;
    let checkpoint_digest = r.u64()?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.string()?;
        let instrument = r.string()?;
        let taxon = r.string()?;
        let mut vector = Vec::with_capacity(feature_dim);
        for _ in 0..feature_dim {
            vector.push(r.f32()?);
        }
        records.push(CachedRecord {
            id,
            instrument,
            taxon,
            vector,
        });
    }
    r.finish()?;
    Ok(EmbeddingCache {
        feature_source,
        feature_dim,
        checkpoint_digest,
        records,
    })
}

/// Join cached records with manifest records (by id = manifest path) to
/// recover splits, producing a table ready for the evaluation sweep.
/// Instrument/taxon disagreements between cache and manifest are integrity
/// errors.
pub fn attach_splits(cache: &EmbeddingCache, manifest: &[DatasetRecord]) -> Result<EmbeddingTable> {
    let by_path: BTreeMap<&str, &DatasetRecord> = manifest
        .iter()
        .map(|r| (r.image_path.as_str(), r))
        .collect();
    let mut records = Vec::with_capacity(cache.records.len());
    for c in &cache.records {
        let m = by_path.get(c.id.as_str()).ok_or_else(|| {
            Error::Integrity(format!(
                "cache record '{}' is not present in the manifest",
                c.id
            ))
        })?;
        if m.instrument != c.instrument || m.taxon != c.taxon {
            return Err(Error::Integrity(format!(
                "cache record '{}' disagrees with the manifest (instrument {} vs {}, taxon '{}' vs '{}')",
                c.id, c.instrument, m.instrument, c.taxon, m.taxon
            )));
        }
        records.push(EmbeddingRecord {
            id: c.id.clone(),
            instrument: c.instrument.clone(),
            taxon: c.taxon.clone(),
            split: m.split,
            vector: c.vector.clone(),
        });
    }
    let table = EmbeddingTable {
        feature_source: cache.feature_source.clone(),
        feature_dim: cache.feature_dim,
        records,
    };
    table.validate()?;
    Ok(table)
}

/// Split a table back into per-instrument caches for writing.
pub fn cache_from_records(
    feature_source: &str,
    feature_dim: usize,
    checkpoint_digest: u64,
    records: Vec<CachedRecord>,
) -> EmbeddingCache {
    EmbeddingCache {
        feature_source: feature_source.to_string(),
        feature_dim,
        checkpoint_digest,
        records,
    }
}

fn write_str(bytes: &mut Vec<u8>, s: &str) {
    bytes.extend_from_slice(&(s.len() as u32).to_le_bytes());
    bytes.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| {
            Error::Integrity(format!("{}: truncated cache", self.path.display()))
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Integrity(format!("{}: non-UTF8 string", self.path.display())))
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
