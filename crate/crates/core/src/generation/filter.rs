use rayon::prelude::*;

use crate::data::{ImageRecord, SyntheticImage, SyntheticPool};
use crate::error::{Error, Result};
use crate::perceptual::{cosine, masked_crop, Masker, PerceptualEmbedder};

/// Similarity threshold used for the object datasets.
pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskerFailurePolicy {
    /// Drop the image and log why.
    #[default]
    Drop,
    Error,
}

/// Keep positives whose masked crop is at least `threshold` similar to the
/// closest masked reference crop. Negatives pass through untouched; kept
/// positives record their score in provenance.
pub fn filter_pool(
    pool: &SyntheticPool,
    refs: &[ImageRecord],
    metric: &dyn PerceptualEmbedder,
    masker: &dyn Masker,
    threshold: f64,
    on_failure: MaskerFailurePolicy,
) -> Result<SyntheticPool> {
    let ref_embs = refs
        .iter()
        .map(|r| {
            let mask = r
                .mask
                .as_ref()
                .ok_or_else(|| Error::MissingMasks(r.instance_id.clone()))?;
            metric.embed(&masked_crop(&r.pixels, mask)?)
        })
        .collect::<Result<Vec<_>>>()?;
    if ref_embs.is_empty() {
        return Err(Error::MissingMasks(pool.instance_id.clone()));
    }

    let scored: Vec<Result<Option<f64>>> = pool
        .positives
        .par_iter()
        .map(|s| {
            let mask = match masker.predict_mask(&s.record) {
                Ok(m) => m,
                Err(e) => {
                    return match on_failure {
                        MaskerFailurePolicy::Error => Err(e),
                        MaskerFailurePolicy::Drop => {
                            log::warn!("dropping {}: {e}", s.record.id);
                            Ok(None)
                        }
                    }
                }
            };
            let emb = metric.embed(&masked_crop(&s.record.pixels, &mask)?)?;
            let score = ref_embs
                .iter()
                .map(|r| cosine(&emb, r))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(Some(score))
        })
        .collect();

    let mut positives = Vec::new();
    for (s, score) in pool.positives.iter().zip(scored) {
        if let Some(score) = score? {
            if score >= threshold {
                let mut kept: SyntheticImage = s.clone();
                kept.provenance.filter_score = Some(score);
                positives.push(kept);
            }
        }
    }
    Ok(SyntheticPool {
        instance_id: pool.instance_id.clone(),
        category: pool.category.clone(),
        positives,
        negatives: pool.negatives.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GeneratorKind, Provenance, Split};
    use crate::perceptual::RecordMasker;
    use crate::raster::{Mask, RgbImage};

    /// Maps the red channel of pixel (0,0) to a unit vector whose cosine with
    /// `(1, 0)` is `red / 100`.
    struct Injected;

    impl PerceptualEmbedder for Injected {
        fn embed(&self, img: &RgbImage) -> Result<Vec<f64>> {
            let s = img.get(0, 0)[0] as f64 / 100.0;
            Ok(vec![s, (1.0 - s * s).max(0.0).sqrt()])
        }
    }

    fn rec(id: &str, red: u8) -> ImageRecord {
        ImageRecord::new(id, "cup", Split::Train, RgbImage::filled(4, 4, [red, 0, 0]))
            .with_mask(Mask::from_fn(4, 4, |_, _| true))
            .unwrap()
    }

    fn pool(reds: &[u8]) -> SyntheticPool {
        let mut p = SyntheticPool::new("cup", "mug");
        for (i, &r) in reds.iter().enumerate() {
            p.positives.push(SyntheticImage {
                record: rec(&format!("p{i}"), r),
                provenance: Provenance::new(GeneratorKind::External, i as u64),
            });
        }
        p.negatives.push(SyntheticImage {
            record: rec("n0", 0),
            provenance: Provenance::new(GeneratorKind::External, 99),
        });
        p
    }

    #[test]
    fn boundary_is_inclusive() {
        let p = pool(&[59, 60, 61]);
        let out = filter_pool(&p, &[rec("ref", 100)], &Injected, &RecordMasker, 0.6, MaskerFailurePolicy::Error).unwrap();
        let ids: Vec<_> = out.positives.iter().map(|s| s.record.id.as_str()).collect();
        assert_eq!(ids, ["p1", "p2"]);
        assert_eq!(out.negatives, p.negatives);
        assert!((out.positives[0].provenance.filter_score.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pass_all_and_idempotent() {
        let p = pool(&[0, 30, 90]);
        let all = filter_pool(&p, &[rec("ref", 100)], &Injected, &RecordMasker, -1.0, MaskerFailurePolicy::Error).unwrap();
        assert_eq!(all.positives.len(), 3);
        let once = filter_pool(&p, &[rec("ref", 100)], &Injected, &RecordMasker, 0.25, MaskerFailurePolicy::Error).unwrap();
        let twice = filter_pool(&once, &[rec("ref", 100)], &Injected, &RecordMasker, 0.25, MaskerFailurePolicy::Error).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn masker_failure_policy() {
        let mut p = pool(&[90]);
        p.positives[0].record.mask = None;
        let dropped = filter_pool(&p, &[rec("ref", 100)], &Injected, &RecordMasker, 0.0, MaskerFailurePolicy::Drop).unwrap();
        assert!(dropped.positives.is_empty());
        assert!(matches!(
            filter_pool(&p, &[rec("ref", 100)], &Injected, &RecordMasker, 0.0, MaskerFailurePolicy::Error),
            Err(Error::MaskerFailure { .. })
        ));
    }
}
