//! Fidelity and diversity of synthetic pools.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, SyntheticPool};
use crate::error::{Error, Result};
use crate::perceptual::{cosine, dot, normalize, object_crop, Masker, PerceptualEmbedder};

/// Padding per side of the object crop, as a fraction of the box size.
pub const CROP_PAD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolAnalysis {
    pub fidelity_per_image: Vec<f64>,
    pub fidelity_mean: f64,
    pub diversity: f64,
    pub pool_digest: String,
}

/// Per-positive cosine between the object crop and the re-normalized mean
/// of the reference crops, plus the mean.
pub fn fidelity(
    pool: &SyntheticPool,
    refs: &[ImageRecord],
    metric: &dyn PerceptualEmbedder,
    masker: &dyn Masker,
) -> Result<(Vec<f64>, f64)> {
    if refs.is_empty() {
        return Err(Error::MissingMasks(pool.instance_id.clone()));
    }
    let ref_embs = refs
        .iter()
        .map(|r| {
            let mask = r
                .mask
                .as_ref()
                .ok_or_else(|| Error::MissingMasks(r.instance_id.clone()))?;
            metric.embed(&object_crop(&r.pixels, mask, CROP_PAD)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = ref_embs[0].len();
    let mut mean = vec![0.0; dim];
    for e in &ref_embs {
        if e.len() != dim {
            return Err(Error::DimensionMismatch(dim, e.len()));
        }
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / ref_embs.len() as f64;
        }
    }
    let mean = normalize(&mean);

    let per_image = pool
        .positives
        .par_iter()
        .map(|s| {
            let mask = masker.predict_mask(&s.record)?;
            let emb = metric.embed(&object_crop(&s.record.pixels, &mask, CROP_PAD)?)?;
            Ok(cosine(&emb, &mean))
        })
        .collect::<Result<Vec<f64>>>()?;
    let fid_mean = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    };
    Ok((per_image, fid_mean))
}

/// One minus the mean cosine over all unordered pairs of positives.
pub fn diversity(pool: &SyntheticPool, metric: &dyn PerceptualEmbedder) -> Result<f64> {
    let n = pool.positives.len();
    if n < 2 {
        return Err(Error::PoolTooSmall(n));
    }
    let embs = pool
        .positives
        .par_iter()
        .map(|s| metric.embed(&s.record.pixels).map(|e| normalize(&e)))
        .collect::<Result<Vec<_>>>()?;
    // Row sums are computed independently and added in index order, so the
    // result does not depend on how rows are scheduled.
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| dot(&embs[i], &embs[j]).clamp(-1.0, 1.0)).sum())
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((1.0 - rows.iter().sum::<f64>() / pairs).clamp(0.0, 2.0))
}

pub fn analyze_pool(
    pool: &SyntheticPool,
    refs: &[ImageRecord],
    metric: &dyn PerceptualEmbedder,
    masker: &dyn Masker,
) -> Result<PoolAnalysis> {
    let (fidelity_per_image, fidelity_mean) = fidelity(pool, refs, metric, masker)?;
    Ok(PoolAnalysis {
        fidelity_per_image,
        fidelity_mean,
        diversity: diversity(pool, metric)?,
        pool_digest: pool.digest(),
    })
}

impl PoolAnalysis {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `pool_digest, fidelity_mean, diversity` rows, one per analysis.
pub fn save_analysis_csv(rows: &[(&str, &PoolAnalysis)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["instance_id", "pool_digest", "fidelity_mean", "diversity"])
        .map_err(io)?;
    for (id, a) in rows {
        w.write_record([
            id.to_string(),
            a.pool_digest.clone(),
            a.fidelity_mean.to_string(),
            a.diversity.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GeneratorKind, Provenance, Split, SyntheticImage};
    use crate::perceptual::RecordMasker;
    use crate::raster::{Mask, RgbImage};

    /// Embeds the mean colour of the image.
    struct MeanColour;

    impl PerceptualEmbedder for MeanColour {
        fn embed(&self, img: &RgbImage) -> Result<Vec<f64>> {
            let mut sum = [0.0; 3];
            for r in 0..img.height() {
                for c in 0..img.width() {
                    for (s, v) in sum.iter_mut().zip(img.get(r, c)) {
                        *s += v as f64;
                    }
                }
            }
            Ok(normalize(&sum))
        }
    }

    fn rec(id: &str, px: [u8; 3]) -> ImageRecord {
        let img = RgbImage::from_fn(16, 16, |_, _| px);
        let mask = Mask::from_fn(16, 16, |r, c| (4..12).contains(&r) && (4..12).contains(&c));
        ImageRecord::new(id, "a", Split::Train, img).with_mask(mask).unwrap()
    }

    fn pool(colours: &[[u8; 3]]) -> SyntheticPool {
        let mut p = SyntheticPool::new("a", "thing");
        for (i, &c) in colours.iter().enumerate() {
            p.positives.push(SyntheticImage {
                record: rec(&format!("p{i}"), c),
                provenance: Provenance::new(GeneratorKind::CutPaste, i as u64),
            });
        }
        p
    }

    #[test]
    fn self_fidelity_and_orthogonal() {
        let p = pool(&[[200, 0, 0], [0, 200, 0]]);
        let (f, m) = fidelity(&p, &[rec("r", [10, 0, 0])], &MeanColour, &RecordMasker).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert!(f[1].abs() < 1e-12);
        assert_eq!(m, (f[0] + f[1]) / 2.0);
    }

    #[test]
    fn diversity_extremes() {
        assert!(diversity(&pool(&[[5, 5, 5]; 4]), &MeanColour).unwrap().abs() < 1e-12);
        let d = diversity(&pool(&[[9, 0, 0], [0, 0, 9]]), &MeanColour).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!(matches!(diversity(&pool(&[[1, 1, 1]]), &MeanColour), Err(Error::PoolTooSmall(1))));
    }

    #[test]
    fn refs_need_masks() {
        let mut r = rec("r", [1, 2, 3]);
        r.mask = None;
        r.bbox = None;
        let err = fidelity(&pool(&[[1, 1, 1]]), &[r], &MeanColour, &RecordMasker).unwrap_err();
        assert!(matches!(err, Error::MissingMasks(_)));
    }
}
