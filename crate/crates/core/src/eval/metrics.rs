//! Confusion counts, threshold metrics and rank-based ROC statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::windowing::GlycemicLabel;

/// Binary confusion counts with hypoglycemia as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same tallies with the positive class swapped.
    pub fn flipped(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Tally predictions against labels.
pub fn confusion(
    predictions: &[GlycemicLabel],
    labels: &[GlycemicLabel],
) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p.is_hypo(), l.is_hypo()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Threshold metrics plus AUC for one positive class. Ratios that come out
/// 0/0 are reported as 0 with the matching `undefined_*` flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub undefined_precision: bool,
    pub undefined_f1: bool,
}

/// Derive the threshold metrics from confusion counts; the AUC cannot be
/// recovered from counts and is passed through.
pub fn metrics_from_confusion(c: &ConfusionCounts, auc: f64) -> Result<MetricSet> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if !(0.0..=1.0).contains(&auc) {
        return Err(Error::Numerical(format!("auc {auc} outside [0, 1]")));
    }
    let accuracy = (c.tp + c.tn) as f64 / total as f64;
    let undefined_precision = c.tp + c.fp == 0;
    let precision = if undefined_precision {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let undefined_f1 = precision + recall == 0.0;
    let f1 = if undefined_f1 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricSet {
        accuracy,
        precision,
        recall,
        f1,
        auc,
        undefined_precision,
        undefined_f1,
    })
}

/// Hypo-positive AUC from probability scores: the fraction of
/// (hypo, normo) pairs ranked correctly, ties counted half. Computed with
/// average ranks in O(n log n); equals brute-force pair counting exactly
/// because every intermediate sum is a half-integer.
pub fn roc_auc(scores: &[f64], labels: &[GlycemicLabel]) -> Result<f64> {
    check_scored(scores, labels)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|l| l.is_hypo()).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientClass(
            "auc needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0f64;
    let mut i = 0usize;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k].is_hypo() {
                pos_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// One point of the ROC curve; `threshold` is the lowest score still
/// predicted positive at this point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve points from (0, 0) down the descending unique scores to
/// (1, 1).
pub fn roc_points(scores: &[f64], labels: &[GlycemicLabel]) -> Result<Vec<RocPoint>> {
    check_scored(scores, labels)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|l| l.is_hypo()).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientClass(
            "roc curve needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0usize;
    while i < n {
        let s = scores[order[i]];
        while i < n && scores[order[i]] == s {
            if labels[order[i]].is_hypo() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: s,
        });
    }
    Ok(points)
}

fn check_scored(scores: &[f64], labels: &[GlycemicLabel]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    Ok(())
}

/// Which metric a bootstrap iteration recomputes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    Auc,
}

impl Metric {
    pub fn key(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Auc => "auc",
        }
    }

    /// Whether the metric reads the positive class specifically, which
    /// requires both classes in the evaluation set.
    pub fn is_class_conditional(self) -> bool {
        !matches!(self, Metric::Accuracy)
    }
}

/// Evaluate one metric on a scored sample; `None` when the metric is 0/0
/// on this sample.
pub(crate) fn metric_value(
    metric: Metric,
    scores: &[f64],
    predictions: &[GlycemicLabel],
    labels: &[GlycemicLabel],
) -> Result<Option<f64>> {
    if metric == Metric::Auc {
        return match roc_auc(scores, labels) {
            Ok(v) => Ok(Some(v)),
            Err(Error::InsufficientClass(_)) => Ok(None),
            Err(e) => Err(e),
        };
    }
    let c = confusion(predictions, labels)?;
    let m = metrics_from_confusion(&c, 0.5)?;
    Ok(match metric {
        Metric::Accuracy => Some(m.accuracy),
        Metric::Precision => (!m.undefined_precision).then_some(m.precision),
        Metric::Recall => {
            if c.tp + c.fn_ == 0 {
                None
            } else {
                Some(m.recall)
            }
        }
        Metric::F1 => (!m.undefined_f1).then_some(m.f1),
        Metric::Auc => unreachable!(),
    })
}
