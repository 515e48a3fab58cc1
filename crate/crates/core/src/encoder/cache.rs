//! On-disk embedding cache keyed by model identity and image content.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{EmbeddingBundle, Encoder, EncoderDescriptor};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const CACHE_DIR_ENV: &str = "PERSREP_CACHE_DIR";

const MAGIC: &[u8; 4] = b"PREB";

/// Wraps an encoder and memoizes `embed` results as files under `dir`.
/// `model_key` must change whenever the encoder's weights do.
pub struct CachedEncoder<'a> {
    inner: &'a dyn Encoder,
    model_key: String,
    dir: PathBuf,
}

impl<'a> CachedEncoder<'a> {
    pub fn new(inner: &'a dyn Encoder, model_key: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            model_key: model_key.into(),
            dir: dir.into(),
        }
    }

    /// Cache rooted at `PERSREP_CACHE_DIR`, if set.
    pub fn from_env(inner: &'a dyn Encoder, model_key: impl Into<String>) -> Option<Self> {
        let dir = std::env::var_os(CACHE_DIR_ENV).filter(|d| !d.is_empty())?;
        Some(Self::new(inner, model_key, PathBuf::from(dir)))
    }

    fn path_for(&self, img: &RgbImage) -> PathBuf {
        let mut h = Sha256::new();
        h.update(self.model_key.as_bytes());
        h.update([0]);
        h.update(img.digest().as_bytes());
        let key = hex::encode(h.finalize());
        self.dir.join(&key[..2]).join(format!("{key}.emb"))
    }
}

fn encode(b: &EmbeddingBundle) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for v in [b.grid.0, b.grid.1, b.patch_size, b.source_dims.0, b.source_dims.1, b.cls.len(), b.patches.ncols()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in b.cls.iter().chain(b.patches.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Option<EmbeddingBundle> {
    let rest = bytes.strip_prefix(MAGIC.as_slice())?;
    if rest.len() < 56 {
        return None;
    }
    let (head, body) = rest.split_at(56);
    let h: Vec<usize> = head
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let (rows, dim, cols) = (h[0].checked_mul(h[1])?, h[5], h[6]);
    if body.len() != (dim + rows.checked_mul(cols)?) * 8 {
        return None;
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Some(EmbeddingBundle {
        cls: vals[..dim].to_vec(),
        patches: Array2::from_shape_vec((rows, cols), vals[dim..].to_vec()).ok()?,
        grid: (h[0], h[1]),
        patch_size: h[2],
        source_dims: (h[3], h[4]),
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().expect("cache paths have a parent");
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Encoder for CachedEncoder<'_> {
    fn descriptor(&self) -> &EncoderDescriptor {
        self.inner.descriptor()
    }

    fn embed(&self, img: &RgbImage) -> Result<EmbeddingBundle> {
        let path = self.path_for(img);
        if let Some(b) = std::fs::read(&path).ok().and_then(|bytes| decode(&bytes)) {
            return Ok(b);
        }
        let b = self.inner.embed(img)?;
        if let Err(e) = write_atomic(&path, &encode(&b)) {
            log::warn!("embedding cache write failed: {e}");
        }
        Ok(b)
    }
}
