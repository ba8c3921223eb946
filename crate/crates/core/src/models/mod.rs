//! The seven classifier families and their shared plumbing.
//!
//! Every family trains on a [`FeatureMatrix`] built from labeled windows in
//! one of two modes: `Sequence` keeps the raw GSR steps, `Static` collapses
//! each window to its mean. The sequence-native families (CNN, LSTM) receive
//! static features as constant sequences so their architectures are
//! unchanged across the ablation; everything else sees a single column.

mod adam;
mod forest;
mod gbdt;
mod knn;
mod logreg;
mod loss;
mod nn;
mod persist;
mod tree;

pub use adam::{adam_update, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use forest::{fit_random_forest, gini_impurity, ForestModel, ForestParams};
pub use gbdt::{fit_gbdt, GbdtModel, GbdtParams};
pub use knn::{fit_knn, KnnModel, KnnParams};
pub use logreg::{fit_logreg, logreg_loss_and_grad, LogregModel};
pub use loss::{sigmoid, weighted_bce};
pub use nn::{
    fit_cnn, fit_lstm, fit_mlp, CnnParams, LstmParams, MlpParams, NeuralArch, NeuralModel,
    NeuralNet,
};
pub use persist::{load_model, save_model};
pub use tree::Node;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::windowing::{ClassWeights, GlycemicLabel, LabeledWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// Serialized under the same short names [`ModelFamily::key`] uses, so
    /// configs, flags and report rows agree.
    #[serde(rename = "lr")]
    Logreg,
    Knn,
    #[serde(rename = "rf")]
    RandomForest,
    Gbdt,
    Mlp,
    Cnn,
    Lstm,
}

impl ModelFamily {
    pub fn all() -> [ModelFamily; 7] {
        [
            ModelFamily::Logreg,
            ModelFamily::Knn,
            ModelFamily::RandomForest,
            ModelFamily::Gbdt,
            ModelFamily::Mlp,
            ModelFamily::Cnn,
            ModelFamily::Lstm,
        ]
    }

    /// Short name used in configs, file names and report rows.
    pub fn key(self) -> &'static str {
        match self {
            ModelFamily::Logreg => "lr",
            ModelFamily::Knn => "knn",
            ModelFamily::RandomForest => "rf",
            ModelFamily::Gbdt => "gbdt",
            ModelFamily::Mlp => "mlp",
            ModelFamily::Cnn => "cnn",
            ModelFamily::Lstm => "lstm",
        }
    }

    /// Table label.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelFamily::Logreg => "LR",
            ModelFamily::Knn => "KNN",
            ModelFamily::RandomForest => "RF",
            ModelFamily::Gbdt => "GBDT",
            ModelFamily::Mlp => "MLP",
            ModelFamily::Cnn => "CNN",
            ModelFamily::Lstm => "LSTM",
        }
    }

    pub fn from_key(key: &str) -> Result<ModelFamily> {
        ModelFamily::all()
            .into_iter()
            .find(|f| f.key() == key)
            .ok_or_else(|| Error::Config(format!("unknown model family {key:?}")))
    }

    /// Families that consume sequences natively and therefore receive
    /// static features as constant sequences.
    pub fn is_sequence_native(self) -> bool {
        matches!(self, ModelFamily::Cnn | ModelFamily::Lstm)
    }

    pub fn is_neural(self) -> bool {
        matches!(self, ModelFamily::Mlp | ModelFamily::Cnn | ModelFamily::Lstm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Static,
    Sequence,
}

impl FeatureMode {
    pub fn key(self) -> &'static str {
        match self {
            FeatureMode::Static => "static",
            FeatureMode::Sequence => "sequence",
        }
    }
}

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "feature matrix of {} values cannot be {rows}x{cols}",
                values.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy a subset of rows, preserving `indices` order.
    pub fn gather(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }
}

/// Build the feature matrix for `family` in `mode` from the windows at
/// `indices`.
pub fn build_features(
    windows: &[LabeledWindow],
    indices: &[usize],
    mode: FeatureMode,
    family: ModelFamily,
) -> Result<FeatureMatrix> {
    if indices.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let width = windows[indices[0]].width();
    if indices.iter().any(|&i| windows[i].width() != width) {
        return Err(Error::Shape("windows of mixed widths".into()));
    }
    let (cols, values) = match (mode, family.is_sequence_native()) {
        (FeatureMode::Sequence, _) => {
            let mut values = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                values.extend_from_slice(&windows[i].gsr_seq);
            }
            (width, values)
        }
        (FeatureMode::Static, false) => {
            let values = indices.iter().map(|&i| windows[i].static_feature()).collect();
            (1, values)
        }
        (FeatureMode::Static, true) => {
            // Constant sequence carrying only the window mean.
            let mut values = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                let m = windows[i].static_feature();
                values.extend(std::iter::repeat(m).take(width));
            }
            (width, values)
        }
    };
    FeatureMatrix::new(indices.len(), cols, values)
}

pub fn gather_labels(windows: &[LabeledWindow], indices: &[usize]) -> Vec<GlycemicLabel> {
    indices.iter().map(|&i| windows[i].label).collect()
}

/// Shared training knobs. Family-specific shapes live in the per-family
/// parameter structs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs for the neural families, full-batch steps for LR.
    pub max_epochs: usize,
    /// Early-stopping patience in epochs (or rounds for GBDT).
    pub patience: usize,
    pub dropout: f64,
    pub l2: f64,
    pub class_weights: ClassWeights,
    pub balanced_batches: bool,
    pub min_minority_fraction: f64,
}

impl TrainConfig {
    pub fn with_seed_and_weights(seed: u64, class_weights: ClassWeights) -> Self {
        TrainConfig {
            seed,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 15,
            patience: 3,
            dropout: 0.3,
            l2: 0.0,
            class_weights,
            balanced_batches: true,
            min_minority_fraction: 0.25,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// What a fit produced, beyond the parameters themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    /// Epochs, steps or boosting rounds actually run.
    pub epochs_run: usize,
    /// Best validation loss seen, for the families that track one.
    pub best_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Logreg(LogregModel),
    Knn(KnnModel),
    Forest(ForestModel),
    Gbdt(GbdtModel),
    Neural(NeuralModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub family: ModelFamily,
    /// Number of feature columns the model was fit on.
    pub input_cols: usize,
    pub params: ModelParams,
    pub meta: TrainingMeta,
}

/// Default decision threshold on the hypo probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub probability: f64,
    pub label: GlycemicLabel,
}

/// Score rows with the hypo probability and threshold them. A probability
/// at or above the threshold predicts hypo.
pub fn predict_proba_at(
    model: &TrainedModel,
    x: &FeatureMatrix,
    threshold: f64,
) -> Result<Vec<ScoredPrediction>> {
    if x.cols != model.input_cols {
        return Err(Error::Shape(format!(
            "model expects {} feature columns, got {}",
            model.input_cols, x.cols
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "decision threshold {threshold} must lie in [0, 1]"
        )));
    }
    let probs: Vec<f64> = match &model.params {
        ModelParams::Logreg(m) => m.predict(x),
        ModelParams::Knn(m) => m.predict(x)?,
        ModelParams::Forest(m) => m.predict(x),
        ModelParams::Gbdt(m) => m.predict(x),
        ModelParams::Neural(m) => m.predict(x)?,
    };
    let mut out = Vec::with_capacity(probs.len());
    for p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Numerical(format!(
                "predicted probability {p} outside [0, 1]"
            )));
        }
        out.push(ScoredPrediction {
            probability: p,
            label: if p >= threshold {
                GlycemicLabel::Hypo
            } else {
                GlycemicLabel::Normo
            },
        });
    }
    Ok(out)
}

/// [`predict_proba_at`] with the default 0.5 threshold.
pub fn predict_proba(model: &TrainedModel, x: &FeatureMatrix) -> Result<Vec<ScoredPrediction>> {
    predict_proba_at(model, x, DEFAULT_THRESHOLD)
}

pub(crate) fn require_both_classes(labels: &[GlycemicLabel]) -> Result<()> {
    let hypo = labels.iter().filter(|l| l.is_hypo()).count();
    if hypo == 0 || hypo == labels.len() {
        return Err(Error::InsufficientClass(
            "training data must contain both classes".into(),
        ));
    }
    Ok(())
}

pub(crate) fn labels_to_targets(labels: &[GlycemicLabel]) -> Vec<f64> {
    labels.iter().map(|l| if l.is_hypo() { 1.0 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(subject: &str, mean: f64) -> LabeledWindow {
        LabeledWindow {
            subject_id: subject.into(),
            start_index: 0,
            gsr_seq: vec![mean - 1.0, mean, mean + 1.0],
            glucose_final: 100.0,
            label: GlycemicLabel::Normo,
        }
    }

    #[test]
    fn static_features_are_window_means() {
        let windows = vec![window("a", 2.0), window("a", -4.0)];
        let x = build_features(&windows, &[0, 1], FeatureMode::Static, ModelFamily::Logreg)
            .unwrap();
        assert_eq!(x.cols, 1);
        assert_eq!(x.values, vec![2.0, -4.0]);
    }

    #[test]
    fn static_mode_tiles_for_sequence_native_families() {
        let windows = vec![window("a", 2.0)];
        let x =
            build_features(&windows, &[0], FeatureMode::Static, ModelFamily::Cnn).unwrap();
        assert_eq!(x.cols, 3);
        assert_eq!(x.values, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn sequence_mode_keeps_raw_steps() {
        let windows = vec![window("a", 2.0)];
        for family in [ModelFamily::Logreg, ModelFamily::Lstm] {
            let x = build_features(&windows, &[0], FeatureMode::Sequence, family).unwrap();
            assert_eq!(x.cols, 3);
            assert_eq!(x.values, vec![1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn gather_preserves_order() {
        let windows = vec![window("a", 1.0), window("a", 2.0), window("a", 3.0)];
        let x = build_features(
            &windows,
            &[2, 0],
            FeatureMode::Static,
            ModelFamily::Logreg,
        )
        .unwrap();
        assert_eq!(x.values, vec![3.0, 1.0]);
    }

    #[test]
    fn family_keys_round_trip() {
        for f in ModelFamily::all() {
            assert_eq!(ModelFamily::from_key(f.key()).unwrap(), f);
        }
        assert!(ModelFamily::from_key("svm").is_err());
    }
}
