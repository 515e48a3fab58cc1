//! Instances, images, annotations and synthetic pools.

mod ingest;
mod pool_io;
mod split;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{mask_to_bbox, BBox, Mask, RgbImage};

pub use ingest::{ingest_dataset, write_dataset, DEFAULT_MIN_TEST};
pub use pool_io::{load_pool, save_pool};
pub use split::split_validation;

/// Every instance carries exactly this many real training images.
pub const TRAIN_IMAGES_PER_INSTANCE: usize = 3;

/// Instance id used for synthetic negatives.
pub const NEGATIVE_INSTANCE: &str = "negative";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Scene condition of a test image: in-distribution, or one of the
/// out-of-distribution shifts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneTag {
    Id,
    Pose,
    Distractors,
    Both,
}

impl SceneTag {
    pub const ALL: [SceneTag; 4] = [SceneTag::Id, SceneTag::Pose, SceneTag::Distractors, SceneTag::Both];

    pub fn as_str(&self) -> &'static str {
        match self {
            SceneTag::Id => "id",
            SceneTag::Pose => "pose",
            SceneTag::Distractors => "distractors",
            SceneTag::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<SceneTag> {
        SceneTag::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: RgbImage,
    pub instance_id: String,
    pub split: Split,
    pub scene: Option<SceneTag>,
    pub mask: Option<Mask>,
    pub bbox: Option<BBox>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, instance_id: impl Into<String>, split: Split, pixels: RgbImage) -> Self {
        Self {
            id: id.into(),
            pixels,
            instance_id: instance_id.into(),
            split,
            scene: None,
            mask: None,
            bbox: None,
        }
    }

    /// Attach a mask and derive the tight box from it.
    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        self.check_mask_dims(&mask)?;
        self.bbox = Some(mask_to_bbox(&mask)?);
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn with_scene(mut self, scene: SceneTag) -> Self {
        self.scene = Some(scene);
        self
    }

    fn check_mask_dims(&self, mask: &Mask) -> Result<()> {
        if mask.dims() != self.pixels.dims() {
            return Err(Error::MaskShapeMismatch {
                image: self.id.clone(),
                mask_h: mask.height(),
                mask_w: mask.width(),
                img_h: self.pixels.height(),
                img_w: self.pixels.width(),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.pixels.dims();
        if let Some(mask) = &self.mask {
            self.check_mask_dims(mask)?;
        }
        if let Some(bbox) = self.bbox {
            if !bbox.fits(h, w) {
                return Err(Error::MalformedAnnotation(format!(
                    "{}: box {:?} outside {h}x{w}",
                    self.id,
                    bbox.to_array()
                )));
            }
            if let Some(mask) = &self.mask {
                if !mask.is_empty() && mask_to_bbox(mask)? != bbox {
                    return Err(Error::MalformedAnnotation(format!(
                        "{}: box {:?} is not the tight box of the mask",
                        self.id,
                        bbox.to_array()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_dense_annotated(&self) -> bool {
        self.mask.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Generic category text of the instance (e.g. "mug").
    pub category: String,
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceDataset {
    pub instances: BTreeMap<String, Instance>,
}

impl InstanceDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Instance> {
        self.instances
            .get(id)
            .ok_or_else(|| Error::UnknownInstance(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.instances.keys().map(String::as_str)
    }

    pub fn all_test(&self) -> impl Iterator<Item = &ImageRecord> {
        self.instances.values().flat_map(|i| i.test.iter())
    }

    pub fn all_train(&self) -> impl Iterator<Item = &ImageRecord> {
        self.instances.values().flat_map(|i| i.train.iter())
    }

    pub fn validate(&self, min_test: usize) -> Result<()> {
        for (id, inst) in &self.instances {
            if inst.train.len() != TRAIN_IMAGES_PER_INSTANCE {
                return Err(Error::MissingTrainImages {
                    instance: id.clone(),
                    found: inst.train.len(),
                    expected: TRAIN_IMAGES_PER_INSTANCE,
                });
            }
            if inst.test.len() < min_test {
                return Err(Error::InsufficientTestImages {
                    instance: id.clone(),
                    found: inst.test.len(),
                    min: min_test,
                });
            }
            let mut seen = std::collections::HashSet::new();
            for rec in inst.train.iter().chain(&inst.test) {
                rec.validate()?;
                if !seen.insert(rec.id.as_str()) {
                    return Err(Error::MalformedAnnotation(format!(
                        "image id `{}` appears more than once in `{id}`",
                        rec.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Content digest over ids, categories, pixels and annotations.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, inst) in &self.instances {
            h.update(id.as_bytes());
            h.update([0]);
            h.update(inst.category.as_bytes());
            h.update([0]);
            for rec in inst.train.iter().chain(&inst.test) {
                h.update(record_digest(rec).as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn record_digest(rec: &ImageRecord) -> String {
    let mut h = Sha256::new();
    h.update(rec.id.as_bytes());
    h.update([0]);
    h.update(rec.pixels.digest().as_bytes());
    if let Some(m) = &rec.mask {
        h.update(m.as_slice().iter().map(|&b| b as u8).collect::<Vec<_>>());
    }
    if let Some(b) = rec.bbox {
        for v in b.to_array() {
            h.update((v as u64).to_le_bytes());
        }
    }
    if let Some(s) = rec.scene {
        h.update(s.as_str().as_bytes());
    }
    hex::encode(h.finalize())
}

/// How a synthetic image was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    CutPaste,
    DreamboothLike,
    External,
    /// Positives are the real training images themselves.
    RealOnly,
}

impl GeneratorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GeneratorKind::CutPaste => "cut_paste",
            GeneratorKind::DreamboothLike => "dreambooth_like",
            GeneratorKind::External => "external",
            GeneratorKind::RealOnly => "real_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: GeneratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub seed: u64,
    /// Paste scale for composited images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Perceptual similarity to the references, once filtered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_score: Option<f64>,
}

impl Provenance {
    pub fn new(generator: GeneratorKind, seed: u64) -> Self {
        Self {
            generator,
            cfg: None,
            caption: None,
            seed,
            scale: None,
            filter_score: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub record: ImageRecord,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPool {
    pub instance_id: String,
    pub category: String,
    pub positives: Vec<SyntheticImage>,
    pub negatives: Vec<SyntheticImage>,
}

impl SyntheticPool {
    pub fn new(instance_id: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            instance_id: instance_id.into(),
            category: category.into(),
            positives: Vec::new(),
            negatives: Vec::new(),
        }
    }

    pub fn positive_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.positives.iter().map(|s| &s.record)
    }

    pub fn negative_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.negatives.iter().map(|s| &s.record)
    }

    /// Digest over every image and its provenance, in pool order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.instance_id.as_bytes());
        h.update([0]);
        for (tag, list) in [("pos", &self.positives), ("neg", &self.negatives)] {
            h.update(tag.as_bytes());
            for s in list {
                h.update(record_digest(&s.record).as_bytes());
                h.update(serde_json::to_vec(&s.provenance).expect("provenance serializes"));
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, split: Split) -> ImageRecord {
        ImageRecord::new(id, "a", split, RgbImage::new(4, 4))
    }

    #[test]
    fn mask_dims_must_match() {
        let err = rec("x", Split::Train).with_mask(Mask::new(3, 4)).unwrap_err();
        assert!(matches!(err, Error::MaskShapeMismatch { .. }));
    }

    #[test]
    fn bbox_must_be_tight() {
        let mut m = Mask::new(4, 4);
        m.set(1, 1, true);
        let mut r = rec("x", Split::Test).with_mask(m).unwrap();
        r.validate().unwrap();
        r.bbox = Some(BBox::new(0, 0, 1, 1));
        assert!(matches!(r.validate(), Err(Error::MalformedAnnotation(_))));
    }

    #[test]
    fn dataset_requires_three_train() {
        let mut ds = InstanceDataset::default();
        ds.instances.insert(
            "a".into(),
            Instance {
                category: "mug".into(),
                train: vec![rec("t0", Split::Train), rec("t1", Split::Train)],
                test: (0..3).map(|i| rec(&format!("q{i}"), Split::Test)).collect(),
            },
        );
        assert!(matches!(ds.validate(3), Err(Error::MissingTrainImages { found: 2, .. })));
    }
}
