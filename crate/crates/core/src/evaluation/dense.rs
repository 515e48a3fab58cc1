//! Patch-level localization: target features, confidence maps, Otsu
//! binarization and the per-image dense prediction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::encoder::{EmbeddingBundle, Encoder};
use crate::error::{Error, Result};
use crate::perceptual::{cosine, normalize, Masker};
use crate::raster::{mask_to_bbox, upscale_bilinear, BBox, Mask};

/// Score recorded for an image where nothing was predicted.
pub const NO_DETECTION_SCORE: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    /// Cosine similarity per patch cell.
    pub values: Array2<f64>,
    pub source_image_id: String,
    /// Bilinear upscaling to the source image size.
    pub upscaled: Option<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensePrediction {
    pub mask: Mask,
    pub bbox: Option<BBox>,
    pub mask_score: f64,
    pub box_score: f64,
}

impl DensePrediction {
    pub fn is_empty(&self) -> bool {
        self.bbox.is_none()
    }

    fn none(h: usize, w: usize) -> Self {
        Self {
            mask: Mask::new(h, w),
            bbox: None,
            mask_score: NO_DETECTION_SCORE,
            box_score: NO_DETECTION_SCORE,
        }
    }
}

/// What to do when a confidence map has a single value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantMapPolicy {
    /// Predict nothing and log a warning.
    #[default]
    Empty,
    Error,
}

/// Patch cells whose pixel footprint is more than half covered by `mask`.
/// Pixel `(r, c)` belongs to cell `(r h / H, c w / W)` by its center.
pub fn covered_cells(mask: &Mask, grid: (usize, usize)) -> Vec<(usize, usize)> {
    let (gh, gw) = grid;
    let (h, w) = mask.dims();
    let mut hits = vec![0usize; gh * gw];
    let mut totals = vec![0usize; gh * gw];
    let cell = |p: usize, n: usize, g: usize| (((2 * p + 1) * g) / (2 * n)).min(g - 1);
    for r in 0..h {
        let cr = cell(r, h, gh);
        for c in 0..w {
            let k = cr * gw + cell(c, w, gw);
            totals[k] += 1;
            hits[k] += mask.get(r, c) as usize;
        }
    }
    (0..gh * gw)
        .filter(|&k| totals[k] > 0 && 2 * hits[k] > totals[k])
        .map(|k| (k / gw, k % gw))
        .collect()
}

fn masked_mean(bundle: &EmbeddingBundle, mask: &Mask) -> Option<Vec<f64>> {
    let cells = covered_cells(mask, bundle.grid);
    if cells.is_empty() {
        return None;
    }
    let mut acc = vec![0.0; bundle.dim()];
    for &(r, c) in &cells {
        for (a, v) in acc.iter_mut().zip(bundle.patch(r, c)) {
            *a += v;
        }
    }
    Some(acc.iter().map(|v| v / cells.len() as f64).collect())
}

/// Unit-norm mean over train images of the mean masked patch vector. Images
/// whose mask covers no patch cell are skipped.
pub fn target_feature(d_r: &[ImageRecord], encoder: &dyn Encoder) -> Result<Vec<f64>> {
    let mut sum: Option<Vec<f64>> = None;
    let mut used = 0usize;
    for rec in d_r {
        let mask = rec.mask.as_ref().ok_or_else(|| Error::MissingMasks(rec.instance_id.clone()))?;
        let bundle = encoder.embed(&rec.pixels)?;
        if let Some(m) = masked_mean(&bundle, mask) {
            let acc = sum.get_or_insert_with(|| vec![0.0; m.len()]);
            for (a, v) in acc.iter_mut().zip(&m) {
                *a += v;
            }
            used += 1;
        }
    }
    let sum = sum.ok_or(Error::EmptyMaskAfterDownscale)?;
    Ok(normalize(&sum.iter().map(|v| v / used as f64).collect::<Vec<_>>()))
}

/// Cosine of each patch of an embedded image against `target`.
pub fn confidence_from_bundle(bundle: &EmbeddingBundle, target: &[f64], image_id: &str) -> ConfidenceMap {
    let (gh, gw) = bundle.grid;
    let values = Array2::from_shape_fn((gh, gw), |(r, c)| cosine(bundle.patch(r, c).as_slice().expect("contiguous"), target));
    let (h, w) = bundle.source_dims;
    ConfidenceMap {
        upscaled: Some(upscale_bilinear(&values, h, w)),
        values,
        source_image_id: image_id.to_string(),
    }
}

pub fn confidence_map(test: &ImageRecord, target: &[f64], encoder: &dyn Encoder) -> Result<ConfidenceMap> {
    let bundle = encoder.embed(&test.pixels)?;
    Ok(confidence_from_bundle(&bundle, target, &test.id))
}

/// Bin edges `min + k w`, `k = 0..=256`.
pub fn otsu_edges(min: f64, max: f64) -> Vec<f64> {
    let w = (max - min) / 256.0;
    (0..=256).map(|k| min + k as f64 * w).collect()
}

/// Histogram bin of `v`: the number of interior edges at or below it.
fn bin_of(v: f64, edges: &[f64]) -> usize {
    edges[1..256].partition_point(|&e| e <= v)
}

/// Between-class variance of the split "bins < k" vs "bins >= k", up to a
/// constant factor, from class counts and bin-index sums. Exact integer
/// inputs make equal splits compare equal.
pub fn otsu_score(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let diff = n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128;
    (diff * diff) as f64 / (n0 as f64 * n1 as f64)
}

/// Middle index of the first run of maximal scores.
pub fn plateau_middle(scores: &[(usize, f64)]) -> usize {
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let start = scores.iter().position(|s| s.1 == best).expect("nonempty");
    let len = scores[start..].iter().take_while(|s| s.1 == best).count();
    scores[start + (len - 1) / 2].0
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`.
/// Returns the threshold and `value >= threshold` per cell. Among equally
/// good splits the middle of the first tied run is used, so an empty gap
/// between two modes is cut in its center.
pub fn otsu_binarize(values: &Array2<f64>, policy: ConstantMapPolicy) -> Result<(f64, Array2<bool>)> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        return match policy {
            ConstantMapPolicy::Error => Err(Error::ConstantMap),
            ConstantMapPolicy::Empty => {
                log::warn!("constant confidence map; predicting nothing");
                Ok((f64::INFINITY, values.mapv(|_| false)))
            }
        };
    }
    let edges = otsu_edges(min, max);
    let mut hist = [0u64; 256];
    for &v in values {
        hist[bin_of(v, &edges)] += 1;
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(j, &c)| j as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut scores = Vec::with_capacity(255);
    for k in 1..256 {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        scores.push((k, otsu_score(n0, s0, n - n0, s - s0)));
    }
    let t = edges[plateau_middle(&scores)];
    Ok((t, values.mapv(|v| v >= t)))
}

/// Binarize the patch-level map, upscale the binary mask to the image size
/// (nearest), and score it by the mean of the bilinearly upscaled map.
pub fn predict_from_map(map: &ConfidenceMap, policy: ConstantMapPolicy) -> Result<DensePrediction> {
    let up = map
        .upscaled
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("confidence map was not upscaled".into()))?;
    let (h, w) = up.dim();
    let (_, cells) = otsu_binarize(&map.values, policy)?;
    let (gh, gw) = cells.dim();
    let mask = Mask::from_fn(gh, gw, |r, c| cells[[r, c]]).resize_nearest(h, w);
    let Ok(bbox) = mask_to_bbox(&mask) else {
        return Ok(DensePrediction::none(h, w));
    };
    let (mut sum_m, mut n_m, mut sum_b) = (0.0, 0usize, 0.0);
    for r in bbox.row_min..=bbox.row_max {
        for c in bbox.col_min..=bbox.col_max {
            sum_b += up[[r, c]];
            if mask.get(r, c) {
                sum_m += up[[r, c]];
                n_m += 1;
            }
        }
    }
    Ok(DensePrediction {
        mask,
        bbox: Some(bbox),
        mask_score: sum_m / n_m as f64,
        box_score: sum_b / bbox.area() as f64,
    })
}

pub fn dense_predict(test: &ImageRecord, target: &[f64], encoder: &dyn Encoder) -> Result<DensePrediction> {
    predict_from_map(&confidence_map(test, target, encoder)?, ConstantMapPolicy::Empty)
}

/// Object masks from the confidence map against a target feature.
pub struct DenseMasker<'a> {
    pub encoder: &'a dyn Encoder,
    pub target: Vec<f64>,
}

impl Masker for DenseMasker<'_> {
    fn predict_mask(&self, rec: &ImageRecord) -> Result<Mask> {
        let p = dense_predict(rec, &self.target, self.encoder)?;
        if p.is_empty() {
            return Err(Error::MaskerFailure {
                image: rec.id.clone(),
                reason: "empty prediction".into(),
            });
        }
        Ok(p.mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_of(values: Array2<f64>, scale: usize) -> ConfidenceMap {
        let (h, w) = values.dim();
        ConfidenceMap {
            upscaled: Some(upscale_bilinear(&values, h * scale, w * scale)),
            values,
            source_image_id: "x".into(),
        }
    }

    #[test]
    fn bimodal_split() {
        let v = Array2::from_shape_fn((4, 4), |(r, _)| if r < 2 { 0.1 } else { 0.9 });
        let (t, b) = otsu_binarize(&v, ConstantMapPolicy::Error).unwrap();
        assert!(t > 0.1 && t <= 0.9);
        assert_eq!(b, v.mapv(|x| x == 0.9));
        assert!((t - 0.5).abs() < 0.01);
    }

    #[test]
    fn constant_map_policies() {
        let v = Array2::from_elem((3, 3), 0.4);
        assert!(matches!(otsu_binarize(&v, ConstantMapPolicy::Error), Err(Error::ConstantMap)));
        let (_, b) = otsu_binarize(&v, ConstantMapPolicy::Empty).unwrap();
        assert!(b.iter().all(|&x| !x));
        let p = predict_from_map(&map_of(v, 8), ConstantMapPolicy::Empty).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.mask_score, NO_DETECTION_SCORE);
    }

    #[test]
    fn hot_block() {
        let v = Array2::from_shape_fn((8, 8), |(r, c)| if (2..5).contains(&r) && (3..6).contains(&c) { 0.9 } else { 0.0 });
        let p = predict_from_map(&map_of(v, 8), ConstantMapPolicy::Error).unwrap();
        assert_eq!(p.bbox, Some(BBox::new(16, 24, 39, 47)));
        assert_eq!(p.mask.count(), 24 * 24);
        assert!(p.mask_score > 0.6 && p.mask_score <= 0.9, "{}", p.mask_score);
        assert_eq!(p.mask_score, p.box_score);
    }

    #[test]
    fn covered_cells_rules() {
        let full = Mask::from_fn(64, 64, |_, _| true);
        assert_eq!(covered_cells(&full, (8, 8)).len(), 64);
        let one = Mask::from_fn(64, 64, |r, c| (8..16).contains(&r) && (24..32).contains(&c));
        assert_eq!(covered_cells(&one, (8, 8)), vec![(1, 3)]);
        let half = Mask::from_fn(64, 64, |r, c| (8..12).contains(&r) && (24..32).contains(&c));
        assert!(covered_cells(&half, (8, 8)).is_empty());
    }
}
