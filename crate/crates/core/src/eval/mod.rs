//! Metrics, split protocol, few-shot subsets and reports.

pub mod experiment;
pub mod metrics;
pub mod report;
pub mod splits;

pub use metrics::{
    auroc, class_mask, classification_metrics, dice, fold_ttest, hd95, ClassificationMetrics,
};
pub use report::{mean_std, save_reports, MetricReport};
pub use splits::{audit, few_shot_subsets, make_splits, test_count, SplitManifest};
