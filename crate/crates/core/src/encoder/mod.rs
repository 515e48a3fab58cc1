//! Encoder abstraction: CLS + patch-grid embeddings, the global feature used
//! for training, low-rank adaptation, and the encoder registry.

mod cache;
mod lora;
mod toy_vit;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{CachedEncoder, CACHE_DIR_ENV};
pub use lora::{lora_forward, AdapterGrad, AdapterGrads, AdapterSet, AdapterSpec, Linear, LoraAdapter};
pub use toy_vit::{EncoderTape, Mode, PoolTape, ToyVit, TrunkTape, TOY_VIT};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Registry entry for an encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub name: String,
    /// Canonical square input side in pixels.
    pub input_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    /// Where weights come from: `builtin` or an external checkpoint name.
    pub weight_source: String,
}

impl EncoderDescriptor {
    pub fn grid_side(&self) -> usize {
        self.input_size.div_ceil(self.patch_size)
    }
}

/// Known encoders. Only the builtin toy backbone is constructible in-process;
/// the pretrained ViTs are listed so configs naming them fail cleanly.
pub fn registry() -> Vec<EncoderDescriptor> {
    let ext = |name: &str, input_size, patch_size, dim| EncoderDescriptor {
        name: name.into(),
        input_size,
        patch_size,
        dim,
        weight_source: format!("external:{name}"),
    };
    vec![
        ToyVit::descriptor_default(),
        ext("dinov2-vitb14", 224, 14, 768),
        ext("clip-vitb16", 224, 16, 512),
        ext("mae-vitb16", 224, 16, 768),
    ]
}

/// Instantiate a registered encoder.
pub fn load_encoder(name: &str) -> Result<ToyVit> {
    match registry().into_iter().find(|d| d.name == name) {
        Some(d) if d.weight_source == "builtin" => Ok(ToyVit::new(0)),
        Some(d) => Err(Error::EncoderUnavailable(format!(
            "{name}: weights ({}) are not available in this build",
            d.weight_source
        ))),
        None => Err(Error::EncoderUnavailable(format!("unknown encoder `{name}`"))),
    }
}

/// Output of one encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub cls: Vec<f64>,
    /// `(h * w) x D`, row-major over the patch grid.
    pub patches: Array2<f64>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub source_dims: (usize, usize),
}

impl EmbeddingBundle {
    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    pub fn patch(&self, r: usize, c: usize) -> ArrayView1<'_, f64> {
        self.patches.row(r * self.grid.1 + c)
    }

    pub fn is_finite(&self) -> bool {
        self.cls.iter().chain(self.patches.iter()).all(|v| v.is_finite())
    }
}

/// `[cls ∥ mean patch]`, length `2D`.
pub fn global_feature(bundle: &EmbeddingBundle) -> Vec<f64> {
    let n = bundle.patches.nrows().max(1) as f64;
    let mean = bundle.patches.sum_axis(ndarray::Axis(0)) / n;
    bundle.cls.iter().copied().chain(mean.iter().copied()).collect()
}

/// Shared inference contract.
pub trait Encoder: Send + Sync {
    fn descriptor(&self) -> &EncoderDescriptor;

    fn embed(&self, img: &RgbImage) -> Result<EmbeddingBundle>;

    fn embed_batch(&self, imgs: &[&RgbImage]) -> Result<Vec<EmbeddingBundle>> {
        imgs.par_iter().map(|img| self.embed(img)).collect()
    }
}

/// Adapter over `encoder` with fresh `A` and zero `B` on every target map.
pub fn attach_adapter(encoder: &ToyVit, spec: &AdapterSpec, seed: u64) -> Result<ToyVit> {
    encoder.attach(spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bundle(cls: Vec<f64>, patches: Array2<f64>, grid: (usize, usize)) -> EmbeddingBundle {
        EmbeddingBundle {
            cls,
            patches,
            grid,
            patch_size: 1,
            source_dims: grid,
        }
    }

    #[test]
    fn global_feature_examples() {
        let b = bundle(vec![1.0, 2.0], array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0], [3.0, 4.0]], (2, 2));
        assert_eq!(global_feature(&b), vec![1.0, 2.0, 3.0, 4.0]);
        let b = bundle(vec![5.0, 5.0], array![[0.0, 0.0], [2.0, 2.0]], (1, 2));
        assert_eq!(global_feature(&b), vec![5.0, 5.0, 1.0, 1.0]);
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(load_encoder(TOY_VIT).unwrap().descriptor().name, TOY_VIT);
        assert!(matches!(load_encoder("dinov2-vitb14"), Err(Error::EncoderUnavailable(_))));
        assert!(matches!(load_encoder("nope"), Err(Error::EncoderUnavailable(_))));
        for d in registry() {
            assert!(d.grid_side() * d.patch_size >= d.input_size);
        }
    }
}
