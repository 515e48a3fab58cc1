//! Brute-force reference implementations the library is checked against.
//! Each one recomputes its quantity from definitions, without sharing code
//! with the crate.

#![allow(dead_code)]

use std::cmp::Ordering;

use ndarray::Array2;
use persrep_core::raster::{BBox, Mask, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scores quantized to a few levels so ties are common.
pub fn tied_scores(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect()
}

/// Average precision by sweeping every distinct score as a threshold:
/// sum over thresholds of (recall gain) x (precision at that threshold).
pub fn pr_auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / n_pos;
        let precision = tp / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// DCG / IDCG with ties broken against the relevant items.
pub fn ndcg_oracle(scores: &[f64], relevant: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]).unwrap() {
        Ordering::Equal => relevant[a].cmp(&relevant[b]),
        o => o,
    });
    let mut dcg = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if relevant[i] {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let n_rel = relevant.iter().filter(|&&r| r).count();
    let mut idcg = 0.0;
    for pos in 0..n_rel {
        idcg += 1.0 / ((pos + 2) as f64).log2();
    }
    dcg / idcg
}

/// Exhaustive Otsu: every one of the 256 histogram edges is tried as a
/// threshold. Class means are taken over bin indices and compared exactly as
/// rationals; ties keep the middle of the first best run.
pub fn otsu_oracle(values: &[f64]) -> Option<(f64, Vec<bool>)> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return None;
    }
    let width = (max - min) / 256.0;
    let edge = |k: usize| min + k as f64 * width;
    // Bin of a value: how many interior edges lie at or below it.
    let bins: Vec<i128> = values
        .iter()
        .map(|&v| (1..256).filter(|&k| edge(k) <= v).count() as i128)
        .collect();
    // Score as an exact fraction: (n1 s0 - n0 s1)^2 / (n0 n1).
    let mut best: Option<(i128, i128)> = None;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut scored: Vec<(usize, (i128, i128))> = Vec::new();
    for k in 0..256usize {
        let t = edge(k);
        let (mut n0, mut s0, mut n1, mut s1) = (0i128, 0i128, 0i128, 0i128);
        for (&v, &b) in values.iter().zip(&bins) {
            if v >= t {
                n1 += 1;
                s1 += b;
            } else {
                n0 += 1;
                s0 += b;
            }
        }
        let frac = if n0 == 0 || n1 == 0 {
            (0, 1)
        } else {
            let d = n1 * s0 - n0 * s1;
            (d * d, n0 * n1)
        };
        scored.push((k, frac));
    }
    let greater = |a: (i128, i128), b: (i128, i128)| a.0 * b.1 > b.0 * a.1;
    let equal = |a: (i128, i128), b: (i128, i128)| a.0 * b.1 == b.0 * a.1;
    for &(_, f) in &scored {
        if best.is_none_or(|b| greater(f, b)) {
            best = Some(f);
        }
    }
    let best = best.unwrap();
    let mut i = 0;
    while i < scored.len() {
        if equal(scored[i].1, best) {
            let start = i;
            while i < scored.len() && equal(scored[i].1, best) {
                i += 1;
            }
            runs.push((start, i - start));
        } else {
            i += 1;
        }
    }
    let (start, len) = runs[0];
    let k = scored[start + (len - 1) / 2].0;
    let t = edge(k);
    Some((t, values.iter().map(|&v| v >= t).collect()))
}

pub fn otsu_oracle_grid(values: &Array2<f64>) -> Option<(f64, Array2<bool>)> {
    let flat: Vec<f64> = values.iter().copied().collect();
    otsu_oracle(&flat).map(|(t, b)| (t, Array2::from_shape_vec(values.dim(), b).unwrap()))
}

pub fn mask_iou_oracle(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Box IoU by counting pixels of the two inclusive rectangles.
pub fn box_iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let rows = a.row_min.min(b.row_min)..=a.row_max.max(b.row_max);
    let (mut inter, mut union) = (0usize, 0usize);
    for r in rows {
        for c in a.col_min.min(b.col_min)..=a.col_max.max(b.col_max) {
            let (x, y) = (a.contains(r, c), b.contains(r, c));
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    inter as f64 / union as f64
}

/// One image of a dense scenario: a prediction (or none) and its ground truth.
#[derive(Clone, Debug)]
pub struct DenseCase {
    pub score: f64,
    pub pred_mask: Option<Mask>,
    pub pred_box: Option<BBox>,
    pub gt_masks: Vec<Mask>,
    pub gt_boxes: Vec<BBox>,
}

/// AP averaged over IoU thresholds and best F1 at IoU 0.5, by enumerating
/// every score threshold. With one prediction per image a prediction is a
/// true positive iff it overlaps one of its image's objects enough.
pub fn dense_oracle(cases: &[DenseCase], use_masks: bool, iou_thresholds: &[f64]) -> (f64, f64, f64) {
    let n_gt: usize = cases
        .iter()
        .map(|c| if use_masks { c.gt_masks.len() } else { c.gt_boxes.len() })
        .sum();
    let preds: Vec<(f64, f64)> = cases
        .iter()
        .filter_map(|c| {
            let iou = if use_masks {
                let m = c.pred_mask.as_ref()?;
                if m.count() == 0 {
                    return None;
                }
                c.gt_masks.iter().map(|g| mask_iou_oracle(m, g)).fold(0.0, f64::max)
            } else {
                let b = c.pred_box.as_ref()?;
                c.gt_boxes.iter().map(|g| box_iou_oracle(b, g)).fold(0.0, f64::max)
            };
            Some((c.score, iou))
        })
        .collect();
    let mut thresholds: Vec<f64> = preds.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let curve = |iou_t: f64| -> Vec<(f64, f64)> {
        thresholds
            .iter()
            .map(|&t| {
                let sel: Vec<&(f64, f64)> = preds.iter().filter(|p| p.0 >= t).collect();
                let tp = sel.iter().filter(|p| p.1 >= iou_t).count() as f64;
                (tp / sel.len() as f64, tp / n_gt as f64)
            })
            .collect()
    };
    // Area under the precision envelope: for each attained recall level, the
    // best precision at that recall or beyond.
    let ap_at = |iou_t: f64| -> f64 {
        let pts = curve(iou_t);
        let mut levels: Vec<f64> = pts.iter().map(|p| p.1).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut prev = 0.0;
        let mut ap = 0.0;
        for r in levels {
            let p = pts.iter().filter(|q| q.1 >= r).map(|q| q.0).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    };
    let ap = if iou_thresholds.is_empty() {
        0.0
    } else {
        iou_thresholds.iter().map(|&t| ap_at(t)).sum::<f64>() / iou_thresholds.len() as f64
    };
    let f1 = curve(0.5)
        .iter()
        .map(|&(p, r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .fold(0.0, f64::max);
    (ap, ap_at(0.5), f1)
}

pub fn random_rect_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let r0 = rng.random_range(0..h);
    let c0 = rng.random_range(0..w);
    let r1 = rng.random_range(r0..h);
    let c1 = rng.random_range(c0..w);
    Mask::from_fn(h, w, |r, c| (r0..=r1).contains(&r) && (c0..=c1).contains(&c))
}

pub fn random_blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.random_bool(p))
}

/// Tight box by visiting every pixel.
pub fn bbox_oracle(mask: &Mask) -> Option<BBox> {
    let mut found: Option<BBox> = None;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                found = Some(match found {
                    None => BBox::new(r, c, r, c),
                    Some(b) => BBox::new(b.row_min.min(r), b.col_min.min(c), b.row_max.max(r), b.col_max.max(c)),
                });
            }
        }
    }
    found
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

pub fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(64, 64, |_, _| [rng.random(), rng.random(), rng.random()])
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Relative error between an analytic and a numeric gradient vector.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Fourth-order central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    let mut at = |p: &mut Vec<f64>, i: usize, d: f64| {
        p[i] = x[i] + d;
        let v = f(p);
        p[i] = x[i];
        v
    };
    (0..x.len())
        .map(|i| {
            let (a, b) = (at(&mut p, i, h), at(&mut p, i, -h));
            let (c, d) = (at(&mut p, i, 2.0 * h), at(&mut p, i, -2.0 * h));
            (8.0 * (a - b) - (c - d)) / (12.0 * h)
        })
        .collect()
}
