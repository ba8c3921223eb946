//! k-nearest-neighbor classifier with uniform voting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::windowing::GlycemicLabel;

use super::{
    labels_to_targets, require_both_classes, FeatureMatrix, ModelFamily, ModelParams,
    TrainedModel, TrainingMeta,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnParams {
    pub k: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams { k: 5 }
    }
}

/// The training set itself; prediction is a scan.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub train_x: FeatureMatrix,
    /// 1.0 for hypo, 0.0 for normo.
    pub train_y: Vec<f64>,
}

impl KnnModel {
    /// Probability of hypo: the hypo fraction among the k nearest training
    /// rows by Euclidean distance. Distance ties break toward the lower
    /// training index, so prediction is order-deterministic.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.cols != self.train_x.cols {
            return Err(Error::Shape(format!(
                "query has {} columns, training data has {}",
                x.cols, self.train_x.cols
            )));
        }
        let rows: Vec<usize> = (0..x.rows).collect();
        Ok(crate::par::map_slice(&rows, |&r| self.predict_row(x.row(r))))
    }

    fn predict_row(&self, query: &[f64]) -> f64 {
        // Max-heap of the best k (distance, index) pairs seen so far.
        let mut heap: std::collections::BinaryHeap<(NotNan, usize)> =
            std::collections::BinaryHeap::with_capacity(self.k + 1);
        for t in 0..self.train_x.rows {
            let d2: f64 = self
                .train_x
                .row(t)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            heap.push((NotNan(d2), t));
            if heap.len() > self.k {
                heap.pop();
            }
        }
        let hits = heap.iter().map(|&(_, t)| self.train_y[t]).sum::<f64>();
        hits / self.k as f64
    }
}

/// Total order on distances; training features are finite by construction.
#[derive(PartialEq)]
struct NotNan(f64);

impl Eq for NotNan {}

impl PartialOrd for NotNan {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NotNan {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.partial_cmp(&other.0).expect("finite distance")
    }
}

pub fn fit_knn(x: &FeatureMatrix, y: &[GlycemicLabel], params: &KnnParams) -> Result<TrainedModel> {
    require_both_classes(y)?;
    if params.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if params.k > x.rows {
        return Err(Error::Config(format!(
            "k = {} exceeds the {} training rows",
            params.k, x.rows
        )));
    }
    if x.rows != y.len() {
        return Err(Error::Shape(format!(
            "{} rows for {} labels",
            x.rows,
            y.len()
        )));
    }
    Ok(TrainedModel {
        family: ModelFamily::Knn,
        input_cols: x.cols,
        params: ModelParams::Knn(KnnModel {
            k: params.k,
            train_x: x.clone(),
            train_y: labels_to_targets(y),
        }),
        meta: TrainingMeta {
            seed: 0,
            epochs_run: 0,
            best_val_loss: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (FeatureMatrix, Vec<GlycemicLabel>) {
        let values = vec![0.0, 0.1, 0.2, 0.3, 10.0, 10.1, 10.2];
        let labels = vec![
            GlycemicLabel::Hypo,
            GlycemicLabel::Hypo,
            GlycemicLabel::Hypo,
            GlycemicLabel::Normo,
            GlycemicLabel::Normo,
            GlycemicLabel::Normo,
            GlycemicLabel::Normo,
        ];
        (FeatureMatrix::new(7, 1, values).unwrap(), labels)
    }

    #[test]
    fn votes_are_neighbor_fractions() {
        let (x, y) = fixture();
        let model = fit_knn(&x, &y, &KnnParams::default()).unwrap();
        let q = FeatureMatrix::new(2, 1, vec![0.05, 10.05]).unwrap();
        let preds = super::super::predict_proba(&model, &q).unwrap();
        // Near 0: neighbors are the three hypo points, 0.3 and 10.0.
        assert_eq!(preds[0].probability, 3.0 / 5.0);
        assert!(preds[0].label.is_hypo());
        // Near 10: 10.0, 10.1, 10.2, 0.3 and one more hypo point.
        assert_eq!(preds[1].probability, 1.0 / 5.0);
        assert!(!preds[1].label.is_hypo());
    }

    #[test]
    fn distance_ties_break_toward_lower_index() {
        // Four training points at the same spot with k = 1: index 0 wins.
        let x = FeatureMatrix::new(4, 1, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let y = vec![
            GlycemicLabel::Hypo,
            GlycemicLabel::Normo,
            GlycemicLabel::Normo,
            GlycemicLabel::Normo,
        ];
        let model = fit_knn(&x, &y, &KnnParams { k: 1 }).unwrap();
        let q = FeatureMatrix::new(1, 1, vec![1.0]).unwrap();
        let preds = super::super::predict_proba(&model, &q).unwrap();
        assert_eq!(preds[0].probability, 1.0);
    }

    #[test]
    fn k_larger_than_training_set_is_rejected() {
        let (x, y) = fixture();
        assert!(matches!(
            fit_knn(&x, &y, &KnnParams { k: 100 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exact_self_query_is_confident() {
        let (x, y) = fixture();
        let model = fit_knn(&x, &y, &KnnParams { k: 3 }).unwrap();
        let q = FeatureMatrix::new(1, 1, vec![0.1]).unwrap();
        let preds = super::super::predict_proba(&model, &q).unwrap();
        assert_eq!(preds[0].probability, 1.0);
    }
}
