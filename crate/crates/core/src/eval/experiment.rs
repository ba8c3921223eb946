//! The experiment matrix: every requested model family crossed with every
//! feature mode, trained and scored on a shared stratified split.
//!
//! Cells run sequentially so their derived seeds, and therefore the whole
//! report, never depend on scheduling; the parallelism lives inside each
//! cell (per-subject preprocessing, batch gradients, bootstrap iterations).
//! A failed cell is recorded in its row and the matrix keeps going.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dsp::{preprocess_cohort, PreprocessConfig};
use crate::error::{Error, Result};
use crate::eval::bootstrap::stratified_bootstrap_ci;
use crate::eval::metrics::{confusion, metrics_from_confusion, roc_auc, roc_points, Metric};
use crate::eval::report::{
    CiOutcome, ClassMetrics, ClassReport, DatasetSummary, EvaluationReport, ReportRow,
    RocCurve, RowMetrics, ValidationMetrics,
};
use crate::ingest::Cohort;
use crate::models::{
    build_features, fit_cnn, fit_gbdt, fit_knn, fit_logreg, fit_lstm, fit_mlp,
    fit_random_forest, gather_labels, predict_proba, CnnParams, FeatureMode, ForestParams,
    GbdtParams, KnnParams, LstmParams, MlpParams, ModelFamily, TrainConfig,
};
use crate::seed::{derive_seed, digest_bytes};
use crate::windowing::{
    class_weights, make_windows, stratified_split, write_windows_csv, ClassWeights,
    GlycemicLabel, LabeledWindow, SplitAssignment, WindowConfig,
};

/// Shared training knobs, one level up from [`TrainConfig`]: the per-cell
/// seed and class weights are filled in by the matrix runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainKnobs {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub l2: f64,
    pub balanced_batches: bool,
    pub min_minority_fraction: f64,
    /// Full-batch Adam steps for the logistic baseline, which has no
    /// epochs or batches.
    pub logreg_steps: usize,
    pub logreg_learning_rate: f64,
}

impl Default for TrainKnobs {
    fn default() -> Self {
        TrainKnobs {
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 15,
            patience: 3,
            dropout: 0.3,
            l2: 0.0,
            balanced_batches: true,
            min_minority_fraction: 0.25,
            logreg_steps: 400,
            logreg_learning_rate: 0.05,
        }
    }
}

impl TrainKnobs {
    /// Concrete [`TrainConfig`] for one cell; logistic regression swaps in
    /// its own step count and learning rate.
    pub fn for_family(
        &self,
        family: ModelFamily,
        seed: u64,
        class_weights: ClassWeights,
    ) -> TrainConfig {
        let logreg = family == ModelFamily::Logreg;
        TrainConfig {
            seed,
            batch_size: self.batch_size,
            learning_rate: if logreg {
                self.logreg_learning_rate
            } else {
                self.learning_rate
            },
            max_epochs: if logreg { self.logreg_steps } else { self.max_epochs },
            patience: self.patience,
            dropout: self.dropout,
            l2: self.l2,
            class_weights,
            balanced_batches: self.balanced_batches,
            min_minority_fraction: self.min_minority_fraction,
        }
    }
}

/// Everything one evaluation run needs, serializable so a config file can
/// express any subset of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub families: Vec<ModelFamily>,
    pub modes: Vec<FeatureMode>,
    pub preprocess: PreprocessConfig,
    pub window: WindowConfig,
    pub split_fractions: [f64; 3],
    pub seed: u64,
    pub bootstrap_iterations: usize,
    pub confidence_level: f64,
    pub train: TrainKnobs,
    pub knn: KnnParams,
    pub forest: ForestParams,
    pub gbdt: GbdtParams,
    pub mlp: MlpParams,
    pub cnn: CnnParams,
    pub lstm: LstmParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            families: ModelFamily::all().to_vec(),
            modes: vec![FeatureMode::Sequence, FeatureMode::Static],
            preprocess: PreprocessConfig::default(),
            window: WindowConfig::default(),
            split_fractions: [0.8, 0.1, 0.1],
            seed: 7,
            bootstrap_iterations: 1000,
            confidence_level: 0.95,
            train: TrainKnobs::default(),
            knn: KnnParams::default(),
            forest: ForestParams::default(),
            gbdt: GbdtParams::default(),
            mlp: MlpParams::default(),
            cnn: CnnParams::default(),
            lstm: LstmParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("families must not be empty".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must not be empty".into()));
        }
        if self.bootstrap_iterations == 0 {
            return Err(Error::Config("bootstrap_iterations must be at least 1".into()));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(Error::Config(format!(
                "confidence_level {} must lie in (0, 1)",
                self.confidence_level
            )));
        }
        Ok(())
    }

    /// The matrix cells in report order, deduplicated.
    fn cells(&self) -> Vec<(ModelFamily, FeatureMode)> {
        let mut cells: Vec<(ModelFamily, FeatureMode)> = self
            .families
            .iter()
            .flat_map(|&f| self.modes.iter().map(move |&m| (f, m)))
            .collect();
        cells.sort_by_key(|&(f, m)| (f.key(), m.key()));
        cells.dedup();
        cells
    }
}

/// Wall-clock seconds for one cell; kept out of the report so the report
/// bytes stay run-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub model: String,
    pub feature_mode: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: EvaluationReport,
    /// One curve per succeeded cell, test-split scores against hypo.
    pub rocs: Vec<RocCurve>,
    pub timings: Vec<CellTiming>,
}

/// Preprocess, window and evaluate a raw cohort end to end.
pub fn run_experiment(cohort: &Cohort, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let series = preprocess_cohort(cohort, &cfg.preprocess)?;
    let mut windows = Vec::new();
    for s in &series {
        windows.extend(make_windows(s, &cfg.window)?);
    }
    experiment_from_windows(&windows, cfg)
}

/// Evaluate already-windowed data: split once, then run every cell against
/// the same assignment.
pub fn experiment_from_windows(
    windows: &[LabeledWindow],
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let split = stratified_split(windows, cfg.split_fractions, derive_seed(cfg.seed, "split"))?;
    let dataset = summarize_dataset(windows, &split)?;

    let mut rows = Vec::new();
    let mut rocs = Vec::new();
    let mut timings = Vec::new();
    for (family, mode) in cfg.cells() {
        let started = Instant::now();
        match run_cell(windows, &split, family, mode, cfg) {
            Ok((metrics, roc)) => {
                rows.push(ReportRow::ok(family, mode.key(), metrics));
                rocs.push(roc);
            }
            Err(e) => {
                log::warn!("cell {}:{} failed: {e}", family.key(), mode.key());
                rows.push(ReportRow::failed(family, mode.key(), &e));
            }
        }
        timings.push(CellTiming {
            model: family.key().to_string(),
            feature_mode: mode.key().to_string(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(ExperimentOutput {
        report: EvaluationReport {
            seed: cfg.seed,
            dataset,
            rows,
        },
        rocs,
        timings,
    })
}

fn summarize_dataset(
    windows: &[LabeledWindow],
    split: &SplitAssignment,
) -> Result<DatasetSummary> {
    let mut subjects: Vec<&str> = windows.iter().map(|w| w.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let hypo = |indices: &[usize]| {
        indices
            .iter()
            .filter(|&&i| windows[i].label.is_hypo())
            .count()
    };
    let hypo_windows = windows.iter().filter(|w| w.label.is_hypo()).count();
    let digest = digest_bytes(write_windows_csv(windows)?.as_bytes());
    Ok(DatasetSummary {
        subjects: subjects.len(),
        windows: windows.len(),
        hypo_windows,
        prevalence: hypo_windows as f64 / windows.len() as f64,
        train_windows: split.train.len(),
        val_windows: split.val.len(),
        test_windows: split.test.len(),
        train_hypo: hypo(&split.train),
        val_hypo: hypo(&split.val),
        test_hypo: hypo(&split.test),
        windows_digest: format!("{digest:016x}"),
    })
}

fn flip(labels: &[GlycemicLabel]) -> Vec<GlycemicLabel> {
    labels
        .iter()
        .map(|l| match l {
            GlycemicLabel::Hypo => GlycemicLabel::Normo,
            GlycemicLabel::Normo => GlycemicLabel::Hypo,
        })
        .collect()
}

/// A bootstrap interval, downgraded to a marker when the metric was
/// undefined in most iterations.
fn maybe_ci(
    scores: &[f64],
    predictions: &[GlycemicLabel],
    labels: &[GlycemicLabel],
    metric: Metric,
    cfg: &ExperimentConfig,
    label: &str,
) -> Result<CiOutcome> {
    let seed = derive_seed(cfg.seed, label);
    match stratified_bootstrap_ci(
        scores,
        predictions,
        labels,
        metric,
        cfg.bootstrap_iterations,
        cfg.confidence_level,
        seed,
    ) {
        Ok(ci) => Ok(CiOutcome::Interval(ci)),
        Err(Error::UnstableMetric {
            undefined,
            iterations,
        }) => Ok(CiOutcome::Unstable {
            undefined,
            iterations,
        }),
        Err(e) => Err(e),
    }
}

/// Point metrics for one positive class, no intervals.
fn class_metrics(
    scores: &[f64],
    predictions: &[GlycemicLabel],
    labels: &[GlycemicLabel],
) -> Result<ClassMetrics> {
    let c = confusion(predictions, labels)?;
    let auc = roc_auc(scores, labels)?;
    Ok(ClassMetrics::from_set(&metrics_from_confusion(&c, auc)?))
}

/// Point metrics plus the four bootstrap intervals for one positive class.
fn class_report(
    scores: &[f64],
    predictions: &[GlycemicLabel],
    labels: &[GlycemicLabel],
    cfg: &ExperimentConfig,
    cell: &str,
    class: &str,
) -> Result<ClassReport> {
    let metrics = class_metrics(scores, predictions, labels)?;
    let ci = |metric: Metric| -> Result<CiOutcome> {
        let label = format!("ci:{cell}:{class}:{}", metric.key());
        maybe_ci(scores, predictions, labels, metric, cfg, &label)
    };
    Ok(ClassReport {
        metrics,
        precision_ci: ci(Metric::Precision)?,
        recall_ci: ci(Metric::Recall)?,
        f1_ci: ci(Metric::F1)?,
        auc_ci: ci(Metric::Auc)?,
    })
}

fn run_cell(
    windows: &[LabeledWindow],
    split: &SplitAssignment,
    family: ModelFamily,
    mode: FeatureMode,
    cfg: &ExperimentConfig,
) -> Result<(RowMetrics, RocCurve)> {
    let cell = format!("{}:{}", family.key(), mode.key());
    let cell_seed = derive_seed(cfg.seed, &format!("train:{cell}"));

    let train_x = build_features(windows, &split.train, mode, family)?;
    let val_x = build_features(windows, &split.val, mode, family)?;
    let test_x = build_features(windows, &split.test, mode, family)?;
    let train_y = gather_labels(windows, &split.train);
    let val_y = gather_labels(windows, &split.val);
    let test_y = gather_labels(windows, &split.test);

    let weights = class_weights(&train_y)?;
    let tc = cfg.train.for_family(family, cell_seed, weights);
    let model = match family {
        ModelFamily::Logreg => fit_logreg(&train_x, &train_y, &tc)?,
        ModelFamily::Knn => fit_knn(&train_x, &train_y, &cfg.knn)?,
        ModelFamily::RandomForest => fit_random_forest(&train_x, &train_y, &cfg.forest, &tc)?,
        ModelFamily::Gbdt => fit_gbdt(&train_x, &train_y, &val_x, &val_y, &cfg.gbdt, &tc)?,
        ModelFamily::Mlp => fit_mlp(&train_x, &train_y, &val_x, &val_y, &cfg.mlp, &tc)?,
        ModelFamily::Cnn => fit_cnn(&train_x, &train_y, &val_x, &val_y, &cfg.cnn, &tc)?,
        ModelFamily::Lstm => fit_lstm(&train_x, &train_y, &val_x, &val_y, &cfg.lstm, &tc)?,
    };

    let scored = predict_proba(&model, &test_x)?;
    let scores: Vec<f64> = scored.iter().map(|s| s.probability).collect();
    let predictions: Vec<GlycemicLabel> = scored.iter().map(|s| s.label).collect();
    // Normo metrics treat normoglycemia as the positive class, so predictions,
    // labels and scores are all reoriented toward it.
    let normo_scores: Vec<f64> = scores.iter().map(|p| 1.0 - p).collect();
    let flipped_pred = flip(&predictions);
    let flipped_y = flip(&test_y);

    let hypo_confusion = confusion(&predictions, &test_y)?;
    let accuracy = (hypo_confusion.tp + hypo_confusion.tn) as f64 / hypo_confusion.total() as f64;
    let accuracy_ci = maybe_ci(
        &scores,
        &predictions,
        &test_y,
        Metric::Accuracy,
        cfg,
        &format!("ci:{cell}:accuracy"),
    )?;
    let hypo = class_report(&scores, &predictions, &test_y, cfg, &cell, "hypo")?;
    let normo = class_report(&normo_scores, &flipped_pred, &flipped_y, cfg, &cell, "normo")?;

    let val_scored = predict_proba(&model, &val_x)?;
    let val_scores: Vec<f64> = val_scored.iter().map(|s| s.probability).collect();
    let val_normo_scores: Vec<f64> = val_scores.iter().map(|p| 1.0 - p).collect();
    let val_pred: Vec<GlycemicLabel> = val_scored.iter().map(|s| s.label).collect();
    let val_confusion = confusion(&val_pred, &val_y)?;
    let validation = ValidationMetrics {
        accuracy: (val_confusion.tp + val_confusion.tn) as f64 / val_confusion.total() as f64,
        hypo: class_metrics(&val_scores, &val_pred, &val_y)?,
        normo: class_metrics(&val_normo_scores, &flip(&val_pred), &flip(&val_y))?,
    };

    let roc = RocCurve {
        model: family.key().to_string(),
        feature_mode: mode.key().to_string(),
        points: roc_points(&scores, &test_y)?,
    };
    let metrics = RowMetrics {
        accuracy,
        accuracy_ci,
        hypo,
        normo,
        validation,
        epochs_run: model.meta.epochs_run,
        best_val_loss: model.meta.best_val_loss,
    };
    Ok((metrics, roc))
}
