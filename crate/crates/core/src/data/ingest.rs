use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImageRecord, Instance, InstanceDataset, SceneTag, Split};
use crate::error::{Error, Result};
use crate::raster::{mask_to_bbox, BBox, Mask, RgbImage};

pub const DEFAULT_MIN_TEST: usize = 3;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    instances: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    category: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Annotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::MalformedAnnotation(format!("{}: {e}", path.display())))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Load a dataset laid out as `root/manifest.json` plus
/// `root/<id>/{train,test,masks}/` and an optional `annotations.json`.
pub fn ingest_dataset(root: &Path, min_test: usize) -> Result<InstanceDataset> {
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    let instances = manifest
        .instances
        .into_par_iter()
        .map(|(id, entry)| load_instance(root, &id, entry.category).map(|inst| (id, inst)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let ds = InstanceDataset { instances };
    ds.validate(min_test)?;
    Ok(ds)
}

fn load_instance(root: &Path, id: &str, category: String) -> Result<Instance> {
    let dir = root.join(id);
    let ann_path = dir.join("annotations.json");
    let annotations: BTreeMap<String, Annotation> = if ann_path.exists() {
        read_json(&ann_path)?
    } else {
        BTreeMap::new()
    };
    let load_split = |split: Split| -> Result<Vec<ImageRecord>> {
        let sub = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        image_files(&dir.join(sub))?
            .par_iter()
            .map(|path| load_record(&dir, id, split, path, &annotations))
            .collect()
    };
    Ok(Instance {
        category,
        train: load_split(Split::Train)?,
        test: load_split(Split::Test)?,
    })
}

fn load_record(
    dir: &Path,
    instance: &str,
    split: Split,
    path: &Path,
    annotations: &BTreeMap<String, Annotation>,
) -> Result<ImageRecord> {
    let stem = stem(path);
    let pixels = RgbImage::load(path)?;
    let mut rec = ImageRecord::new(format!("{instance}/{stem}"), instance, split, pixels);
    let mask_path = dir.join("masks").join(format!("{stem}.png"));
    if mask_path.exists() {
        let mask = Mask::load(&mask_path)?;
        if mask.dims() != rec.pixels.dims() {
            return Err(Error::MaskShapeMismatch {
                image: rec.id,
                mask_h: mask.height(),
                mask_w: mask.width(),
                img_h: rec.pixels.height(),
                img_w: rec.pixels.width(),
            });
        }
        if !mask.is_empty() {
            rec.bbox = Some(mask_to_bbox(&mask)?);
        }
        rec.mask = Some(mask);
    }
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    if let Some(ann) = annotations.get(&stem).or_else(|| annotations.get(file_name)) {
        if let Some([r0, c0, r1, c1]) = ann.bbox {
            rec.bbox = Some(BBox::new(r0, c0, r1, c1));
        }
        if let Some(scene) = &ann.scene {
            rec.scene = Some(SceneTag::parse(scene).ok_or_else(|| {
                Error::MalformedAnnotation(format!("{}: unknown scene `{scene}`", rec.id))
            })?);
        }
    }
    rec.validate()?;
    Ok(rec)
}

/// Write `dataset` in the layout read by [`ingest_dataset`].
pub fn write_dataset(dataset: &InstanceDataset, root: &Path) -> Result<()> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(root)?;
    let manifest = Manifest {
        instances: dataset
            .instances
            .iter()
            .map(|(id, inst)| {
                (
                    id.clone(),
                    ManifestEntry {
                        category: inst.category.clone(),
                    },
                )
            })
            .collect(),
    };
    let mpath = root.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

    dataset
        .instances
        .par_iter()
        .try_for_each(|(id, inst)| -> Result<()> {
            let dir = root.join(id);
            let mut annotations = BTreeMap::new();
            for (split, recs) in [("train", &inst.train), ("test", &inst.test)] {
                mk(&dir.join(split))?;
                for rec in recs {
                    let stem = rec.id.rsplit('/').next().unwrap_or(&rec.id).to_string();
                    rec.pixels.save_png(&dir.join(split).join(format!("{stem}.png")))?;
                    if let Some(mask) = &rec.mask {
                        mk(&dir.join("masks"))?;
                        mask.save_png(&dir.join("masks").join(format!("{stem}.png")))?;
                    }
                    if rec.bbox.is_some() || rec.scene.is_some() {
                        annotations.insert(
                            stem,
                            Annotation {
                                bbox: rec.bbox.map(|b| b.to_array()),
                                scene: rec.scene.map(|s| s.as_str().to_string()),
                            },
                        );
                    }
                }
            }
            if !annotations.is_empty() {
                let p = dir.join("annotations.json");
                fs::write(&p, serde_json::to_string_pretty(&annotations)?).map_err(|e| Error::io(&p, e))?;
            }
            Ok(())
        })
}
