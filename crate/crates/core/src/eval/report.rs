//! Report structures and the three output formats.
//!
//! `report.json` is the canonical lossless form: struct field order fixes
//! the key order, floats print in shortest round-trip notation, and
//! parse-then-emit reproduces the bytes. The markdown tables mirror the
//! shape of the per-class results tables (hypoglycemia with an accuracy
//! column, normoglycemia without); the CSV flattens one row per
//! model and feature mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::bootstrap::ConfidenceInterval;
use crate::eval::metrics::{MetricSet, RocPoint};
use crate::models::ModelFamily;

/// Per-class threshold metrics; accuracy is class-independent and lives
/// once per row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub undefined_precision: bool,
    pub undefined_f1: bool,
}

impl ClassMetrics {
    pub fn from_set(m: &MetricSet) -> ClassMetrics {
        ClassMetrics {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: m.auc,
            undefined_precision: m.undefined_precision,
            undefined_f1: m.undefined_f1,
        }
    }
}

/// A bootstrap interval, or the reason there is none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CiOutcome {
    Interval(ConfidenceInterval),
    /// The metric was 0/0 in more than half the iterations.
    Unstable { undefined: usize, iterations: usize },
}

impl CiOutcome {
    pub fn interval(&self) -> Option<&ConfidenceInterval> {
        match self {
            CiOutcome::Interval(ci) => Some(ci),
            CiOutcome::Unstable { .. } => None,
        }
    }
}

/// Test-set metrics for one positive class with their intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub metrics: ClassMetrics,
    pub precision_ci: CiOutcome,
    pub recall_ci: CiOutcome,
    pub f1_ci: CiOutcome,
    pub auc_ci: CiOutcome,
}

/// Validation-set snapshot recorded for the overfitting check; no
/// intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub accuracy: f64,
    pub hypo: ClassMetrics,
    pub normo: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub accuracy: f64,
    pub accuracy_ci: CiOutcome,
    pub hypo: ClassReport,
    pub normo: ClassReport,
    pub validation: ValidationMetrics,
    /// Epochs, steps or boosting rounds the fit actually ran.
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
}

/// One experiment-matrix cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub feature_mode: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RowMetrics>,
}

impl ReportRow {
    pub fn ok(family: ModelFamily, mode_key: &str, metrics: RowMetrics) -> ReportRow {
        ReportRow {
            model: family.key().to_string(),
            feature_mode: mode_key.to_string(),
            status: "ok".into(),
            error: None,
            metrics: Some(metrics),
        }
    }

    pub fn failed(family: ModelFamily, mode_key: &str, error: &Error) -> ReportRow {
        ReportRow {
            model: family.key().to_string(),
            feature_mode: mode_key.to_string(),
            status: "failed".into(),
            error: Some(error.to_string()),
            metrics: None,
        }
    }

    /// Human-readable row name, e.g. `LSTM (sequence)`.
    pub fn label(&self) -> String {
        let name = ModelFamily::from_key(&self.model)
            .map(|f| f.display_name().to_string())
            .unwrap_or_else(|_| self.model.clone());
        format!("{name} ({})", self.feature_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub subjects: usize,
    pub windows: usize,
    pub hypo_windows: usize,
    pub prevalence: f64,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    pub train_hypo: usize,
    pub val_hypo: usize,
    pub test_hypo: usize,
    /// FNV-1a digest of the canonical windows CSV, hex.
    pub windows_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub rows: Vec<ReportRow>,
}

/// ROC curve for one matrix cell, emitted as a plot-data CSV next to the
/// report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub model: String,
    pub feature_mode: String,
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Suggested artifact file name, `roc_<model>_<mode>.csv`.
    pub fn file_name(&self) -> String {
        format!("roc_{}_{}.csv", self.model, self.feature_mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

/// Render the report; JSON is canonical, CSV and markdown are derived
/// views.
pub fn emit_report(report: &EvaluationReport, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    match format {
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(report)
                .map_err(|e| Error::Numerical(format!("report serialization failed: {e}")))?;
            text.push('\n');
            Ok(text)
        }
        ReportFormat::Csv => emit_csv(report),
        ReportFormat::Markdown => Ok(emit_markdown(report)),
    }
}

/// Plot-data CSV with one ROC point per line.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    out
}

const CSV_HEADER: [&str; 46] = [
    "model",
    "feature_mode",
    "status",
    "error",
    "accuracy",
    "accuracy_ci_low",
    "accuracy_ci_high",
    "hypo_precision",
    "hypo_recall",
    "hypo_f1",
    "hypo_auc",
    "hypo_undefined_precision",
    "hypo_undefined_f1",
    "hypo_precision_ci_low",
    "hypo_precision_ci_high",
    "hypo_recall_ci_low",
    "hypo_recall_ci_high",
    "hypo_f1_ci_low",
    "hypo_f1_ci_high",
    "hypo_auc_ci_low",
    "hypo_auc_ci_high",
    "normo_precision",
    "normo_recall",
    "normo_f1",
    "normo_auc",
    "normo_undefined_precision",
    "normo_undefined_f1",
    "normo_precision_ci_low",
    "normo_precision_ci_high",
    "normo_recall_ci_low",
    "normo_recall_ci_high",
    "normo_f1_ci_low",
    "normo_f1_ci_high",
    "normo_auc_ci_low",
    "normo_auc_ci_high",
    "val_accuracy",
    "val_hypo_precision",
    "val_hypo_recall",
    "val_hypo_f1",
    "val_hypo_auc",
    "val_normo_precision",
    "val_normo_recall",
    "val_normo_f1",
    "val_normo_auc",
    "epochs_run",
    "best_val_loss",
];

fn push_ci(record: &mut Vec<String>, ci: &CiOutcome) {
    match ci.interval() {
        Some(iv) => {
            record.push(iv.low.to_string());
            record.push(iv.high.to_string());
        }
        None => {
            record.push(String::new());
            record.push(String::new());
        }
    }
}

fn push_class(record: &mut Vec<String>, class: &ClassReport) {
    let m = &class.metrics;
    record.push(m.precision.to_string());
    record.push(m.recall.to_string());
    record.push(m.f1.to_string());
    record.push(m.auc.to_string());
    record.push(m.undefined_precision.to_string());
    record.push(m.undefined_f1.to_string());
    push_ci(record, &class.precision_ci);
    push_ci(record, &class.recall_ci);
    push_ci(record, &class.f1_ci);
    push_ci(record, &class.auc_ci);
}

fn emit_csv(report: &EvaluationReport) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(CSV_HEADER)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in &report.rows {
        let mut record: Vec<String> = vec![
            row.model.clone(),
            row.feature_mode.clone(),
            row.status.clone(),
            row.error.clone().unwrap_or_default(),
        ];
        match &row.metrics {
            Some(m) => {
                record.push(m.accuracy.to_string());
                push_ci(&mut record, &m.accuracy_ci);
                push_class(&mut record, &m.hypo);
                push_class(&mut record, &m.normo);
                let v = &m.validation;
                for value in [
                    v.accuracy,
                    v.hypo.precision,
                    v.hypo.recall,
                    v.hypo.f1,
                    v.hypo.auc,
                    v.normo.precision,
                    v.normo.recall,
                    v.normo.f1,
                    v.normo.auc,
                ] {
                    record.push(value.to_string());
                }
                record.push(m.epochs_run.to_string());
                record.push(m.best_val_loss.map(|v| v.to_string()).unwrap_or_default());
            }
            None => record.extend(std::iter::repeat(String::new()).take(CSV_HEADER.len() - 4)),
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(format!("csv not utf-8: {e}")))
}

fn fmt_metric(value: f64, ci: &CiOutcome) -> String {
    match ci.interval() {
        Some(iv) => format!("{value:.2} [{:.2}, {:.2}]", iv.low, iv.high),
        None => format!("{value:.2} [unstable]"),
    }
}

fn emit_markdown(report: &EvaluationReport) -> String {
    let d = &report.dataset;
    let mut out = String::new();
    out.push_str("# GSR hypoglycemia classification report\n\n");
    out.push_str(&format!("- seed: {}\n", report.seed));
    out.push_str(&format!(
        "- windows: {} from {} subjects ({} hypo, prevalence {:.4})\n",
        d.windows, d.subjects, d.hypo_windows, d.prevalence
    ));
    out.push_str(&format!(
        "- split: {} train / {} val / {} test\n",
        d.train_windows, d.val_windows, d.test_windows
    ));
    out.push_str(&format!("- windows digest: {}\n", d.windows_digest));

    out.push_str("\n## Hypoglycemia (positive class)\n\n");
    out.push_str("| Model | Accuracy | Recall | F1-score | AUC |\n");
    out.push_str("|---|---|---|---|---|\n");
    for row in &report.rows {
        match &row.metrics {
            Some(m) => out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                row.label(),
                fmt_metric(m.accuracy, &m.accuracy_ci),
                fmt_metric(m.hypo.metrics.recall, &m.hypo.recall_ci),
                fmt_metric(m.hypo.metrics.f1, &m.hypo.f1_ci),
                fmt_metric(m.hypo.metrics.auc, &m.hypo.auc_ci),
            )),
            None => out.push_str(&format!(
                "| {} | failed | failed | failed | failed |\n",
                row.label()
            )),
        }
    }

    out.push_str("\n## Normoglycemia\n\n");
    out.push_str("| Model | Recall | F1-score | AUC |\n");
    out.push_str("|---|---|---|---|\n");
    for row in &report.rows {
        match &row.metrics {
            Some(m) => out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                row.label(),
                fmt_metric(m.normo.metrics.recall, &m.normo.recall_ci),
                fmt_metric(m.normo.metrics.f1, &m.normo.f1_ci),
                fmt_metric(m.normo.metrics.auc, &m.normo.auc_ci),
            )),
            None => out.push_str(&format!(
                "| {} | failed | failed | failed |\n",
                row.label()
            )),
        }
    }

    out.push_str("\n## Validation set (hypoglycemia)\n\n");
    out.push_str("| Model | Accuracy | Recall | F1-score | AUC |\n");
    out.push_str("|---|---|---|---|---|\n");
    for row in &report.rows {
        match &row.metrics {
            Some(m) => out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                row.label(),
                m.validation.accuracy,
                m.validation.hypo.recall,
                m.validation.hypo.f1,
                m.validation.hypo.auc,
            )),
            None => out.push_str(&format!(
                "| {} | failed | failed | failed | failed |\n",
                row.label()
            )),
        }
    }
    out
}
