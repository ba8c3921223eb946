//! Evaluation: threshold metrics, rank-based AUC, stratified-bootstrap
//! confidence intervals, and the model-by-feature-mode experiment matrix
//! behind the report artifacts.
//!
//! Hypoglycemia is the positive class everywhere; normoglycemia blocks are
//! the same machinery run on flipped labels, so the two AUCs are exact
//! complements. Metrics with an empty denominator (a model that never
//! predicts a class) report 0 with an `undefined_*` flag rather than NaN,
//! and a bootstrap interval undefined in most iterations is downgraded to
//! an [`report::CiOutcome::Unstable`] marker instead of failing the run.

mod bootstrap;
mod experiment;
mod metrics;
mod report;

pub use bootstrap::{stratified_bootstrap_ci, ConfidenceInterval};
pub use experiment::{
    experiment_from_windows, run_experiment, CellTiming, ExperimentConfig, ExperimentOutput,
    TrainKnobs,
};
pub use metrics::{
    confusion, metrics_from_confusion, roc_auc, roc_points, ConfusionCounts, Metric, MetricSet,
    RocPoint,
};
pub use report::{
    emit_report, roc_csv, CiOutcome, ClassMetrics, ClassReport, DatasetSummary,
    EvaluationReport, ReportFormat, ReportRow, RocCurve, RowMetrics, ValidationMetrics,
};
