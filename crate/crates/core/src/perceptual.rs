//! Pluggable perceptual embedders and mask predictors used for pool
//! filtering and pool analysis.

use crate::data::ImageRecord;
use crate::encoder::{global_feature, Encoder};
use crate::error::{Error, Result};
use crate::raster::{mask_to_bbox, Mask, RgbImage};

/// Maps an image to a unit-norm embedding.
pub trait PerceptualEmbedder: Send + Sync {
    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

/// Predicts the object mask of a generated image.
pub trait Masker: Send + Sync {
    fn predict_mask(&self, rec: &ImageRecord) -> Result<Mask>;
}

/// Uses the mask the record already carries.
#[derive(Clone, Copy, Debug, Default)]
pub struct RecordMasker;

impl Masker for RecordMasker {
    fn predict_mask(&self, rec: &ImageRecord) -> Result<Mask> {
        rec.mask.clone().ok_or_else(|| Error::MaskerFailure {
            image: rec.id.clone(),
            reason: "record has no mask".into(),
        })
    }
}

/// Encoder global feature, L2-normalized.
pub struct EncoderMetric<'a> {
    pub encoder: &'a dyn Encoder,
}

impl PerceptualEmbedder for EncoderMetric<'_> {
    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let bundle = self.encoder.embed(img)?;
        Ok(normalize(&global_feature(&bundle)))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        a.to_vec()
    } else {
        a.iter().map(|v| v / n).collect()
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        (dot(a, b) / d).clamp(-1.0, 1.0)
    }
}

/// Object pixels of `img` on black, cropped to the mask's tight box.
pub fn masked_crop(img: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    let bbox = mask_to_bbox(mask)?;
    Ok(RgbImage::from_fn(bbox.height(), bbox.width(), |r, c| {
        let (rr, cc) = (bbox.row_min + r, bbox.col_min + c);
        if mask.get(rr, cc) {
            img.get(rr, cc)
        } else {
            [0, 0, 0]
        }
    }))
}

/// Crop around the object: the mask's tight box grown by `pad` per side.
pub fn object_crop(img: &RgbImage, mask: &Mask, pad: f64) -> Result<RgbImage> {
    let bbox = mask_to_bbox(mask)?.padded(pad, img.height(), img.width());
    Ok(img.crop(bbox))
}
