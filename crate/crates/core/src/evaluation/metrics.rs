//! Ranking and detection metrics on plain score lists.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BBox, Mask};

/// Indices sorted by descending score (stable, NaN last).
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (scores[a], scores[b]);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => y.total_cmp(&x),
        }
    });
    idx
}

/// Runs of equal scores in descending order.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in descending(scores) {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Non-interpolated average precision. Tied scores form one group whose
/// positives all take the precision at the end of the group.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores) {
        let pos = g.iter().filter(|&&i| labels[i]).count();
        tp += pos;
        seen += g.len();
        ap += pos as f64 * tp as f64 / seen as f64;
    }
    Ok(ap / n_pos as f64)
}

/// NDCG of a full ranking with binary gains. Tied scores are ranked
/// pessimistically: irrelevant items first.
pub fn ndcg(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(Error::DimensionMismatch(scores.len(), relevant.len()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyRetrievalSet);
    }
    let n_rel = relevant.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return Err(Error::EmptyRelevance);
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut rank = 0;
    let mut dcg = 0.0;
    for g in tie_groups(scores) {
        let rel = g.iter().filter(|&&i| relevant[i]).count();
        rank += g.len() - rel;
        for _ in 0..rel {
            rank += 1;
            dcg += discount(rank);
        }
    }
    let idcg: f64 = (1..=n_rel).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseMode {
    Bbox,
    Mask,
}

/// One image's prediction as the metric sees it. `None` geometry means no
/// detection.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDetection {
    pub image_id: String,
    pub score: f64,
    pub mask: Option<Mask>,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub masks: Vec<Mask>,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseScores {
    /// AP averaged over the IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    /// Best F1 over score thresholds at IoU 0.5.
    pub f1: f64,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn best_iou(det: &ScoredDetection, gt: &GroundTruth, mode: DenseMode) -> f64 {
    match mode {
        DenseMode::Mask => det
            .mask
            .as_ref()
            .map(|m| gt.masks.iter().map(|g| m.iou(g)).fold(0.0, f64::max))
            .unwrap_or(0.0),
        DenseMode::Bbox => det
            .bbox
            .as_ref()
            .map(|b| gt.boxes.iter().map(|g| b.iou(g)).fold(0.0, f64::max))
            .unwrap_or(0.0),
    }
}

/// Precision/recall after each tie group of detections, in descending score order.
fn pr_curve(scores: &[f64], tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let (mut hits, mut seen) = (0usize, 0usize);
    tie_groups(scores)
        .into_iter()
        .map(|g| {
            hits += g.iter().filter(|&&i| tp[i]).count();
            seen += g.len();
            (hits as f64 / seen as f64, hits as f64 / n_gt as f64)
        })
        .collect()
}

/// All-point interpolated AP from (precision, recall) points.
fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let envelope = curve[i..].iter().map(|p| p.0).fold(0.0, f64::max);
        ap += (curve[i].1 - prev_recall) * envelope;
        prev_recall = curve[i].1;
    }
    ap
}

/// Detection / segmentation AP and F1 with one prediction per image.
/// Detections without geometry (the no-detection sentinel) are not ranked.
pub fn dense_ap_f1(
    predictions: &[ScoredDetection],
    gts: &[GroundTruth],
    mode: DenseMode,
    iou_thresholds: &[f64],
) -> Result<DenseScores> {
    let pred_ids: BTreeSet<&str> = predictions.iter().map(|p| p.image_id.as_str()).collect();
    let gt_ids: BTreeSet<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
    if pred_ids != gt_ids || pred_ids.len() != predictions.len() || gt_ids.len() != gts.len() {
        return Err(Error::MismatchedImageSets);
    }
    let n_gt: usize = gts
        .iter()
        .map(|g| match mode {
            DenseMode::Mask => g.masks.len(),
            DenseMode::Bbox => g.boxes.len(),
        })
        .sum();
    if n_gt == 0 {
        return Err(Error::NoPositives);
    }
    let dets: Vec<(&ScoredDetection, f64)> = predictions
        .iter()
        .filter(|p| match mode {
            DenseMode::Mask => p.mask.as_ref().is_some_and(|m| !m.is_empty()),
            DenseMode::Bbox => p.bbox.is_some(),
        })
        .map(|p| {
            let gt = gts.iter().find(|g| g.image_id == p.image_id).expect("id sets match");
            (p, best_iou(p, gt, mode))
        })
        .collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.0.score).collect();
    let at = |thr: f64| -> Vec<(f64, f64)> {
        let tp: Vec<bool> = dets.iter().map(|d| d.1 >= thr).collect();
        pr_curve(&scores, &tp, n_gt)
    };
    let ap = if iou_thresholds.is_empty() {
        0.0
    } else {
        iou_thresholds.iter().map(|&t| interpolated_ap(&at(t))).sum::<f64>() / iou_thresholds.len() as f64
    };
    let curve50 = at(0.5);
    let f1 = curve50
        .iter()
        .map(|&(p, r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .fold(0.0, f64::max);
    Ok(DenseScores {
        ap,
        ap50: interpolated_ap(&curve50),
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pr_auc_examples() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert!((pr_auc(&[0.9, 0.8, 0.4], &[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!(matches!(pr_auc(&[0.1], &[false]), Err(Error::NoPositives)));
        // Ties: one positive and one negative at the top share precision 1/2.
        assert_eq!(pr_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&[0.9, 0.8, 0.7, 0.1], &[true, true, true, false]).unwrap(), 1.0);
        let v = ndcg(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        let oracle = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.9197).abs() < 1e-4);
        assert!(matches!(ndcg(&[0.1, 0.2], &[false, false]), Err(Error::EmptyRelevance)));
        assert!(matches!(ndcg(&[], &[]), Err(Error::EmptyRetrievalSet)));
    }

    fn square(r: usize, c: usize, s: usize) -> (Mask, BBox) {
        let m = Mask::from_fn(16, 16, |y, x| (r..r + s).contains(&y) && (c..c + s).contains(&x));
        (m, BBox::new(r, c, r + s - 1, c + s - 1))
    }

    #[test]
    fn perfect_and_empty_predictors() {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for i in 0..5 {
            let (m, b) = square(i, i, 4);
            preds.push(ScoredDetection {
                image_id: format!("im{i}"),
                score: i as f64 * 0.1,
                mask: Some(m.clone()),
                bbox: Some(b),
            });
            gts.push(GroundTruth {
                image_id: format!("im{i}"),
                masks: vec![m],
                boxes: vec![b],
            });
        }
        for mode in [DenseMode::Mask, DenseMode::Bbox] {
            let s = dense_ap_f1(&preds, &gts, mode, &coco_iou_thresholds()).unwrap();
            assert_eq!((s.ap, s.ap50, s.f1), (1.0, 1.0, 1.0));
        }
        let none: Vec<_> = preds
            .iter()
            .map(|p| ScoredDetection {
                score: -1.0,
                mask: None,
                bbox: None,
                ..p.clone()
            })
            .collect();
        let s = dense_ap_f1(&none, &gts, DenseMode::Mask, &coco_iou_thresholds()).unwrap();
        assert_eq!((s.ap, s.f1), (0.0, 0.0));
        assert!(matches!(
            dense_ap_f1(&preds[..4], &gts, DenseMode::Mask, &[0.5]),
            Err(Error::MismatchedImageSets)
        ));
    }
}
