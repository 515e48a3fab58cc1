//! Instance-level task protocols: classification (PR-AUC), retrieval (NDCG),
//! detection and segmentation (Otsu-binarized confidence maps, AP and F1).

mod dense;
mod metrics;
mod report;

pub use dense::{
    confidence_from_bundle, confidence_map, covered_cells, dense_predict, otsu_binarize, otsu_edges, otsu_score,
    plateau_middle, predict_from_map, target_feature, ConfidenceMap, ConstantMapPolicy, DenseMasker, DensePrediction,
    NO_DETECTION_SCORE,
};
pub use metrics::{
    coco_iou_thresholds, dense_ap_f1, ndcg, pr_auc, DenseMode, DenseScores, GroundTruth, ScoredDetection,
};
pub use report::{
    classification_confidence, evaluate_dataset, evaluate_instance, retrieval_ndcg, EvalOptions, EvalReport,
    InstanceReport, Metrics, Task, REPORT_SCHEMA_VERSION,
};
