//! On-disk image-embedding cache.
//!
//! File layout (`<dir>/<key>.pemb`, little-endian):
//!
//! ```text
//! "PEMB1" | u32 channels | u32 rows | u32 cols | f32 payload (row-major) | u32 len | fingerprint (UTF-8)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use sha2::{Digest, Sha256};

use super::ImageEmbedding;
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"PEMB1";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub digest: String,
    pub source_id: String,
    pub fingerprint: String,
}

impl CacheKey {
    pub fn new(source_id: &str, fingerprint: &str) -> Self {
        let mut h = Sha256::new();
        h.update((source_id.len() as u64).to_le_bytes());
        h.update(source_id.as_bytes());
        h.update(fingerprint.as_bytes());
        Self {
            digest: hex::encode(h.finalize()),
            source_id: source_id.to_string(),
            fingerprint: fingerprint.to_string(),
        }
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.pemb", self.digest))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub payload: ImageEmbedding,
}

impl CacheEntry {
    pub fn new(payload: ImageEmbedding) -> Self {
        Self {
            key: CacheKey::new(&payload.source_id, &payload.backbone_fingerprint),
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheLookup {
    Hit(CacheEntry),
    Miss,
}

/// Whether a put actually wrote a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Written,
    AlreadyPresent,
}

pub fn write_embedding_file(path: &Path, emb: &ImageEmbedding) -> Result<()> {
    let (c, h, w) = emb.data.dim();
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        for d in [c, h, w] {
            let d = u32::try_from(d).map_err(|_| std::io::Error::other("dimension exceeds u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for v in emb.data.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        let fp = emb.backbone_fingerprint.as_bytes();
        let len = u32::try_from(fp.len()).map_err(|_| std::io::Error::other("fingerprint too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(fp)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_embedding_file(path: &Path, source_id: &str) -> Result<ImageEmbedding> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let io = |e| Error::io(path, e);
    let mut rd = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 5];
    rd.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("missing PEMB1 magic"));
    }
    let mut u32_buf = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        rd.read_exact(&mut u32_buf).map_err(io)?;
        *d = u32::from_le_bytes(u32_buf) as usize;
    }
    let len = dims.iter().product::<usize>();
    let mut raw = vec![0u8; len * 4];
    rd.read_exact(&mut raw).map_err(io)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    rd.read_exact(&mut u32_buf).map_err(io)?;
    let mut fp = vec![0u8; u32::from_le_bytes(u32_buf) as usize];
    rd.read_exact(&mut fp).map_err(io)?;
    let mut trailing = [0u8; 1];
    if rd.read(&mut trailing).map_err(io)? != 0 {
        return Err(bad("trailing bytes after fingerprint"));
    }
    let fingerprint = String::from_utf8(fp).map_err(|_| bad("fingerprint is not UTF-8"))?;
    let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), values).map_err(|e| bad(&e.to_string()))?;
    Ok(ImageEmbedding {
        data,
        source_id: source_id.to_string(),
        backbone_fingerprint: fingerprint,
    })
}

/// Atomic put: writes a temp file, then renames it into place. Re-putting an
/// identical payload is a no-op.
pub fn cache_put(dir: &Path, entry: &CacheEntry) -> Result<PutOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let offered = &entry.payload.backbone_fingerprint;
    if offered != &entry.key.fingerprint {
        return Err(Error::CacheConflict {
            key: entry.key.digest.clone(),
            stored: entry.key.fingerprint.clone(),
            offered: offered.clone(),
        });
    }
    if let CacheLookup::Hit(existing) = cache_get(dir, &entry.key)? {
        if existing.payload.data == entry.payload.data {
            return Ok(PutOutcome::AlreadyPresent);
        }
        return Err(Error::CacheConflict {
            key: entry.key.digest.clone(),
            stored: existing.payload.backbone_fingerprint,
            offered: format!("{offered} (different payload)"),
        });
    }
    let path = entry.key.path_in(dir);
    let tmp = dir.join(format!(".{}.{}.tmp", entry.key.digest, std::process::id()));
    write_embedding_file(&tmp, &entry.payload)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(PutOutcome::Written)
}

pub fn cache_get(dir: &Path, key: &CacheKey) -> Result<CacheLookup> {
    let path = key.path_in(dir);
    if !path.exists() {
        return Ok(CacheLookup::Miss);
    }
    let payload = read_embedding_file(&path, &key.source_id)?;
    if payload.backbone_fingerprint != key.fingerprint {
        return Err(Error::CacheConflict {
            key: key.digest.clone(),
            stored: payload.backbone_fingerprint,
            offered: key.fingerprint.clone(),
        });
    }
    Ok(CacheLookup::Hit(CacheEntry {
        key: key.clone(),
        payload,
    }))
}
