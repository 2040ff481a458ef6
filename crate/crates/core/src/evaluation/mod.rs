//! Localization protocol (activation regions, scaled boxes, precision/recall
//! sweep, average precision) and classification metrics with bootstrap
//! confidence intervals.

mod detection;
mod metrics;
mod report;

pub use detection::{
    average_precision, boxes_at_scale, default_scales, match_boxes, pr_sweep, random_centroid_case,
    regions_from_activation, DetectionCase, MatchCounts, PrPoint, Region, AP_DEFINITION,
};
pub use metrics::{
    balanced_accuracy, bootstrap_ci, classification_metrics, BootstrapInterval, ClassificationReport,
};
pub use report::{
    annotated, baseline_cases, cases_from_maps, cases_from_model, classification_eval, detection_report,
    model_activation, points_csv, sweep, top_weighted_prototype, ClassMetricCi, ClassificationEval,
    DetectionReport, SweepResult,
};
