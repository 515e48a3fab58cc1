//! Per-instance evaluation over the four tasks and the serialized report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, InstanceDataset};
use crate::encoder::{EmbeddingBundle, Encoder};
use crate::error::{Error, Result};
use crate::perceptual::cosine;

use super::dense::{confidence_from_bundle, predict_from_map, target_feature, ConstantMapPolicy};
use super::metrics::{coco_iou_thresholds, dense_ap_f1, ndcg, pr_auc, DenseMode, GroundTruth, ScoredDetection};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Retrieval,
    Detection,
    Segmentation,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Classification, Task::Retrieval, Task::Detection, Task::Segmentation];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub tasks: BTreeSet<Task>,
    pub iou_thresholds: Vec<f64>,
    /// Score other instances' annotated test images in the dense tasks, as
    /// images with no target object.
    pub dense_include_other_instances: bool,
    pub constant_map: ConstantMapPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.into_iter().collect(),
            iou_thresholds: coco_iou_thresholds(),
            dense_include_other_instances: true,
            constant_map: ConstantMapPolicy::Empty,
        }
    }
}

/// One value per metric column; `None` when the task was skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pr_auc: Option<f64>,
    pub ndcg: Option<f64>,
    pub det_ap: Option<f64>,
    pub det_ap50: Option<f64>,
    pub det_f1: Option<f64>,
    pub seg_ap: Option<f64>,
    pub seg_ap50: Option<f64>,
    pub seg_f1: Option<f64>,
}

impl Metrics {
    /// `(task, metric, value)` in column order.
    pub fn entries(&self) -> [(&'static str, &'static str, Option<f64>); 8] {
        [
            ("classification", "pr_auc", self.pr_auc),
            ("retrieval", "ndcg", self.ndcg),
            ("detection", "ap", self.det_ap),
            ("detection", "ap50", self.det_ap50),
            ("detection", "f1", self.det_f1),
            ("segmentation", "ap", self.seg_ap),
            ("segmentation", "ap50", self.seg_ap50),
            ("segmentation", "f1", self.seg_f1),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Option<f64>; 8] {
        [
            &mut self.pr_auc,
            &mut self.ndcg,
            &mut self.det_ap,
            &mut self.det_ap50,
            &mut self.det_f1,
            &mut self.seg_ap,
            &mut self.seg_ap50,
            &mut self.seg_f1,
        ]
    }

    /// Per-column mean over the inputs that have the column.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
        let mut sums = [(0.0, 0usize); 8];
        for m in items {
            for (s, (_, _, v)) in sums.iter_mut().zip(m.entries()) {
                if let Some(v) = v {
                    s.0 += v;
                    s.1 += 1;
                }
            }
        }
        let mut out = Metrics::default();
        for (f, (sum, n)) in out.fields_mut().into_iter().zip(sums) {
            *f = (n > 0).then(|| sum / n as f64);
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub metrics: Metrics,
    /// Breakdown by scene tag.
    pub splits: BTreeMap<String, Metrics>,
    /// Why tasks were skipped.
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub label: String,
    pub encoder: String,
    pub dataset_digest: String,
    pub instances: BTreeMap<String, InstanceReport>,
    pub aggregate: Metrics,
    pub aggregate_splits: BTreeMap<String, Metrics>,
}

impl EvalReport {
    pub fn new(label: &str, encoder: &str, dataset_digest: &str, instances: BTreeMap<String, InstanceReport>) -> Self {
        let aggregate = Metrics::mean(instances.values().map(|r| &r.metrics));
        let tags: BTreeSet<&String> = instances.values().flat_map(|r| r.splits.keys()).collect();
        let aggregate_splits = tags
            .into_iter()
            .map(|t| (t.clone(), Metrics::mean(instances.values().filter_map(|r| r.splits.get(t)))))
            .collect();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            label: label.into(),
            encoder: encoder.into(),
            dataset_digest: dataset_digest.into(),
            instances,
            aggregate,
            aggregate_splits,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Flat rows `(instance_id, task, metric, split, value)`; the aggregate
    /// uses instance id `mean`.
    pub fn rows(&self) -> Vec<(String, &'static str, &'static str, String, f64)> {
        let mut out = Vec::new();
        let mut push = |inst: &str, split: &str, m: &Metrics| {
            for (task, metric, v) in m.entries() {
                if let Some(v) = v {
                    out.push((inst.to_string(), task, metric, split.to_string(), v));
                }
            }
        };
        for (id, r) in &self.instances {
            push(id, "all", &r.metrics);
            for (tag, m) in &r.splits {
                push(id, tag, m);
            }
        }
        push("mean", "all", &self.aggregate);
        for (tag, m) in &self.aggregate_splits {
            push("mean", tag, m);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["instance_id", "task", "metric", "split", "value"]).map_err(err)?;
        for (inst, task, metric, split, v) in self.rows() {
            w.write_record([inst.as_str(), task, metric, split.as_str(), &format!("{v:.10}")])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fixed-width table of the aggregate and per-instance metrics.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("   -  ".to_string(), |v| format!("{:6.1}", 100.0 * v));
        let mut s = format!(
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            self.label, "cls", "ret", "detAP", "detF1", "segAP", "segF1"
        );
        let mut line = |name: &str, m: &Metrics| {
            s.push_str(&format!(
                "{:<16} {} {} {} {} {} {}\n",
                name,
                fmt(m.pr_auc),
                fmt(m.ndcg),
                fmt(m.det_ap),
                fmt(m.det_f1),
                fmt(m.seg_ap),
                fmt(m.seg_f1)
            ));
        };
        for (id, r) in &self.instances {
            line(id, &r.metrics);
        }
        line("mean", &self.aggregate);
        s
    }
}

/// Maximum CLS cosine between `test` and any train image.
pub fn classification_confidence(test: &ImageRecord, d_r: &[ImageRecord], encoder: &dyn Encoder) -> Result<f64> {
    let t = encoder.embed(&test.pixels)?;
    let refs = d_r
        .iter()
        .map(|r| encoder.embed(&r.pixels))
        .collect::<Result<Vec<_>>>()?;
    Ok(max_cls_similarity(&t, &refs))
}

fn max_cls_similarity(t: &EmbeddingBundle, refs: &[EmbeddingBundle]) -> f64 {
    refs.iter().map(|r| cosine(&t.cls, &r.cls)).fold(f64::NEG_INFINITY, f64::max)
}

/// NDCG of the retrieval set ranked by CLS cosine to `query`; relevant items
/// belong to the query's instance.
pub fn retrieval_ndcg(query: &ImageRecord, retrieval_set: &[ImageRecord], encoder: &dyn Encoder) -> Result<f64> {
    if retrieval_set.is_empty() {
        return Err(Error::EmptyRetrievalSet);
    }
    let q = encoder.embed(&query.pixels)?;
    let scores = retrieval_set
        .iter()
        .map(|r| Ok(cosine(&q.cls, &encoder.embed(&r.pixels)?.cls)))
        .collect::<Result<Vec<_>>>()?;
    let rel: Vec<bool> = retrieval_set.iter().map(|r| r.instance_id == query.instance_id).collect();
    ndcg(&scores, &rel)
}

fn embed_all<'a>(encoder: &dyn Encoder, recs: &[&'a ImageRecord]) -> Result<BTreeMap<&'a str, EmbeddingBundle>> {
    let bundles = recs
        .par_iter()
        .map(|r| encoder.embed(&r.pixels))
        .collect::<Result<Vec<_>>>()?;
    Ok(recs.iter().map(|r| r.id.as_str()).zip(bundles).collect())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Evaluate `encoder` as the personalized encoder of `instance_id`.
///
/// Classification ranks every instance's test images; retrieval ranks every
/// instance's train images for each of the target's test images; dense tasks
/// predict once per annotated test image. Scene-tag breakdowns keep the
/// target's images with that tag and the other instances' images with the
/// same tag.
pub fn evaluate_instance(
    dataset: &InstanceDataset,
    instance_id: &str,
    encoder: &dyn Encoder,
    opts: &EvalOptions,
) -> Result<InstanceReport> {
    let inst = dataset.get(instance_id)?;
    let mut tests: Vec<&ImageRecord> = dataset.all_test().collect();
    tests.sort_by(|a, b| a.id.cmp(&b.id));
    let mut train: Vec<&ImageRecord> = dataset.all_train().collect();
    train.sort_by(|a, b| a.id.cmp(&b.id));
    let emb_test = embed_all(encoder, &tests)?;
    let emb_train = embed_all(encoder, &train)?;
    let refs: Vec<EmbeddingBundle> = inst.train.iter().map(|r| emb_train[r.id.as_str()].clone()).collect();

    let mut tags: BTreeSet<String> = inst.test.iter().filter_map(|r| r.scene.map(|s| s.as_str().to_string())).collect();
    let in_split = |r: &ImageRecord, tag: Option<&str>| tag.is_none_or(|t| r.scene.map(|s| s.as_str()) == Some(t));
    let mut report = InstanceReport::default();
    let mut splits: BTreeMap<String, Metrics> = tags.iter().map(|t| (t.clone(), Metrics::default())).collect();

    if opts.tasks.contains(&Task::Classification) {
        let scored: Vec<(f64, bool, &ImageRecord)> = tests
            .iter()
            .map(|r| (max_cls_similarity(&emb_test[r.id.as_str()], &refs), r.instance_id == instance_id, *r))
            .collect();
        let run = |tag: Option<&str>| -> Result<f64> {
            let sel: Vec<_> = scored.iter().filter(|s| in_split(s.2, tag)).collect();
            if !sel.iter().any(|s| !s.1) {
                return Err(Error::NoNegatives);
            }
            pr_auc(&sel.iter().map(|s| s.0).collect::<Vec<_>>(), &sel.iter().map(|s| s.1).collect::<Vec<_>>())
        };
        match run(None) {
            Ok(v) => {
                report.metrics.pr_auc = Some(v);
                for (tag, m) in &mut splits {
                    m.pr_auc = run(Some(tag)).ok();
                }
            }
            Err(e) => report.flags.push(format!("classification skipped: {e}")),
        }
    }

    if opts.tasks.contains(&Task::Retrieval) {
        let per_query: Vec<(f64, &ImageRecord)> = tests
            .iter()
            .filter(|q| q.instance_id == instance_id)
            .map(|q| {
                let qe = &emb_test[q.id.as_str()];
                let scores: Vec<f64> = train.iter().map(|r| cosine(&qe.cls, &emb_train[r.id.as_str()].cls)).collect();
                let rel: Vec<bool> = train.iter().map(|r| r.instance_id == instance_id).collect();
                Ok((ndcg(&scores, &rel)?, *q))
            })
            .collect::<Result<_>>()?;
        report.metrics.ndcg = mean(&per_query.iter().map(|p| p.0).collect::<Vec<_>>());
        for (tag, m) in &mut splits {
            m.ndcg = mean(&per_query.iter().filter(|p| in_split(p.1, Some(tag))).map(|p| p.0).collect::<Vec<_>>());
        }
    }

    let dense_tasks = [Task::Detection, Task::Segmentation];
    if dense_tasks.iter().any(|t| opts.tasks.contains(t)) {
        let mut d_r = inst.train.clone();
        d_r.sort_by(|a, b| a.id.cmp(&b.id));
        match dense_eval(instance_id, encoder, &d_r, &tests, &emb_test, opts, &tags) {
            Ok((all, by_tag)) => {
                merge_dense(&mut report.metrics, &all, opts);
                for (tag, m) in by_tag {
                    if let Some(s) = splits.get_mut(&tag) {
                        merge_dense(s, &m, opts);
                    }
                }
            }
            Err(e) => report.flags.push(format!("dense tasks skipped: {e}")),
        }
    }
    tags.retain(|t| splits.get(t).is_some_and(|m| m != &Metrics::default()));
    report.splits = splits.into_iter().filter(|(t, _)| tags.contains(t)).collect();
    Ok(report)
}

fn merge_dense(into: &mut Metrics, from: &Metrics, opts: &EvalOptions) {
    if opts.tasks.contains(&Task::Detection) {
        into.det_ap = from.det_ap;
        into.det_ap50 = from.det_ap50;
        into.det_f1 = from.det_f1;
    }
    if opts.tasks.contains(&Task::Segmentation) {
        into.seg_ap = from.seg_ap;
        into.seg_ap50 = from.seg_ap50;
        into.seg_f1 = from.seg_f1;
    }
}

type DenseResult = (Metrics, BTreeMap<String, Metrics>);

fn dense_eval(
    instance_id: &str,
    encoder: &dyn Encoder,
    d_r: &[ImageRecord],
    tests: &[&ImageRecord],
    emb_test: &BTreeMap<&str, EmbeddingBundle>,
    opts: &EvalOptions,
    tags: &BTreeSet<String>,
) -> Result<DenseResult> {
    let target = target_feature(d_r, encoder)?;
    let annotated: Vec<&ImageRecord> = tests
        .iter()
        .filter(|r| r.is_dense_annotated() && (opts.dense_include_other_instances || r.instance_id == instance_id))
        .copied()
        .collect();
    if !annotated.iter().any(|r| r.instance_id == instance_id) {
        return Err(Error::MissingMasks(instance_id.to_string()));
    }
    let preds = annotated
        .par_iter()
        .map(|r| predict_from_map(&confidence_from_bundle(&emb_test[r.id.as_str()], &target, &r.id), opts.constant_map))
        .collect::<Result<Vec<_>>>()?;

    let score = |subset: &dyn Fn(&ImageRecord) -> bool| -> Result<Metrics> {
        let mut dets_box = Vec::new();
        let mut dets_mask = Vec::new();
        let mut gts = Vec::new();
        for (r, p) in annotated.iter().zip(&preds) {
            if !subset(r) {
                continue;
            }
            let own = r.instance_id == instance_id;
            gts.push(GroundTruth {
                image_id: r.id.clone(),
                masks: if own { r.mask.iter().cloned().collect() } else { vec![] },
                boxes: if own { r.bbox.iter().copied().collect() } else { vec![] },
            });
            dets_box.push(ScoredDetection {
                image_id: r.id.clone(),
                score: p.box_score,
                mask: None,
                bbox: p.bbox,
            });
            dets_mask.push(ScoredDetection {
                image_id: r.id.clone(),
                score: p.mask_score,
                mask: (!p.is_empty()).then(|| p.mask.clone()),
                bbox: None,
            });
        }
        let det = dense_ap_f1(&dets_box, &gts, DenseMode::Bbox, &opts.iou_thresholds)?;
        let seg = dense_ap_f1(&dets_mask, &gts, DenseMode::Mask, &opts.iou_thresholds)?;
        Ok(Metrics {
            det_ap: Some(det.ap),
            det_ap50: Some(det.ap50),
            det_f1: Some(det.f1),
            seg_ap: Some(seg.ap),
            seg_ap50: Some(seg.ap50),
            seg_f1: Some(seg.f1),
            ..Metrics::default()
        })
    };
    let all = score(&|_| true)?;
    let mut by_tag = BTreeMap::new();
    for tag in tags {
        let f = |r: &ImageRecord| r.scene.map(|s| s.as_str()) == Some(tag.as_str());
        if let Ok(m) = score(&f) {
            by_tag.insert(tag.clone(), m);
        }
    }
    Ok((all, by_tag))
}

/// Evaluate every instance, each with the encoder `encoder_for` returns.
pub fn evaluate_dataset<'e>(
    dataset: &InstanceDataset,
    label: &str,
    encoder_name: &str,
    encoder_for: impl Fn(&str) -> Result<&'e dyn Encoder>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut instances = BTreeMap::new();
    for id in dataset.ids() {
        instances.insert(id.to_string(), evaluate_instance(dataset, id, encoder_for(id)?, opts)?);
    }
    Ok(EvalReport::new(label, encoder_name, &dataset.digest(), instances))
}
