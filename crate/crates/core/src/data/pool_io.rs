//! Pool persistence: `<dir>/{positives,negatives}/*.png`, masks under
//! `<dir>/masks/`, and `<dir>/provenance.json`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImageRecord, Provenance, Split, SyntheticImage, SyntheticPool};
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

#[derive(Serialize, Deserialize)]
struct PoolFile {
    instance_id: String,
    category: String,
    digest: String,
    positives: Vec<Entry>,
    negatives: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    file: String,
    instance_id: String,
    #[serde(default)]
    has_mask: bool,
    #[serde(flatten)]
    provenance: Provenance,
}

fn file_name(id: &str) -> String {
    id.replace('/', "__")
}

pub fn save_pool(pool: &SyntheticPool, dir: &Path) -> Result<()> {
    for sub in ["positives", "negatives", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let write = |sub: &str, list: &[SyntheticImage]| -> Result<Vec<Entry>> {
        list.par_iter()
            .map(|s| {
                let name = file_name(&s.record.id);
                s.record.pixels.save_png(&dir.join(sub).join(format!("{name}.png")))?;
                if let Some(mask) = &s.record.mask {
                    mask.save_png(&dir.join("masks").join(format!("{name}.png")))?;
                }
                Ok(Entry {
                    file: s.record.id.clone(),
                    instance_id: s.record.instance_id.clone(),
                    has_mask: s.record.mask.is_some(),
                    provenance: s.provenance.clone(),
                })
            })
            .collect()
    };
    let file = PoolFile {
        instance_id: pool.instance_id.clone(),
        category: pool.category.clone(),
        digest: pool.digest(),
        positives: write("positives", &pool.positives)?,
        negatives: write("negatives", &pool.negatives)?,
    };
    let p = dir.join("provenance.json");
    fs::write(&p, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&p, e))
}

pub fn load_pool(dir: &Path) -> Result<SyntheticPool> {
    let p = dir.join("provenance.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let file: PoolFile = serde_json::from_str(&text)?;
    let read = |sub: &str, entries: Vec<Entry>| -> Result<Vec<SyntheticImage>> {
        entries
            .into_par_iter()
            .map(|e| {
                let name = file_name(&e.file);
                let pixels = RgbImage::load(&dir.join(sub).join(format!("{name}.png")))?;
                let mut record = ImageRecord::new(e.file, e.instance_id, Split::Train, pixels);
                if e.has_mask {
                    record = record.with_mask(Mask::load(&dir.join("masks").join(format!("{name}.png")))?)?;
                }
                Ok(SyntheticImage {
                    record,
                    provenance: e.provenance,
                })
            })
            .collect()
    };
    let pool = SyntheticPool {
        instance_id: file.instance_id,
        category: file.category,
        positives: read("positives", file.positives)?,
        negatives: read("negatives", file.negatives)?,
    };
    if pool.digest() != file.digest {
        return Err(Error::MalformedAnnotation(format!(
            "{}: pool digest mismatch",
            p.display()
        )));
    }
    Ok(pool)
}
