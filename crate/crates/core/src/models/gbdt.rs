//! Gradient-boosted trees on the logistic loss.
//!
//! Trees grow level-wise with exact greedy splits over presorted feature
//! columns. Positive (hypo) examples carry `scale_pos_weight` in the
//! gradient statistics; boosting stops early when the class-weighted
//! validation loss stops improving and the ensemble is truncated to the
//! best round.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::loss::{sigmoid, weighted_bce, BCE_EPS};
use crate::models::tree::{Node, Tree};
use crate::models::{
    labels_to_targets, require_both_classes, FeatureMatrix, ModelFamily, ModelParams,
    TrainConfig, TrainedModel, TrainingMeta,
};
use crate::par;
use crate::windowing::GlycemicLabel;

const MIN_GAIN: f64 = 1e-12;
const SETTLED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 regularization on leaf values.
    pub lambda: f64,
    /// Boosting rounds without validation improvement before stopping.
    pub patience: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            rounds: 200,
            max_depth: 6,
            learning_rate: 0.1,
            lambda: 1.0,
            patience: 10,
        }
    }
}

impl GbdtParams {
    fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.max_depth == 0 || self.patience == 0 {
            return Err(Error::Config(
                "gbdt rounds, max_depth and patience must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("gbdt learning_rate must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config("gbdt lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Additive model over [`Tree`]s; leaf values are already scaled by the
/// learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub init_score: f64,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        par::map_indexed(x.rows, |r| {
            let row = x.row(r);
            let score: f64 = self.trees.iter().map(|t| t.eval(row)).sum();
            sigmoid(self.init_score + score)
        })
    }
}

pub fn fit_gbdt(
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    val_x: &FeatureMatrix,
    val_y: &[GlycemicLabel],
    params: &GbdtParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    params.validate()?;
    require_both_classes(y)?;
    if x.rows != y.len() || val_x.rows != val_y.len() {
        return Err(Error::Shape("feature rows and labels disagree".into()));
    }
    if val_x.cols != x.cols {
        return Err(Error::Shape(format!(
            "validation data has {} columns, training data has {}",
            val_x.cols, x.cols
        )));
    }
    if val_x.rows == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }

    let n = x.rows;
    let targets = labels_to_targets(y);
    let spw = cfg.class_weights.scale_pos_weight;
    let weights: Vec<f64> = y.iter().map(|&l| if l.is_hypo() { spw } else { 1.0 }).collect();

    let weight_total: f64 = weights.iter().sum();
    let hypo_mass: f64 = weights
        .iter()
        .zip(y)
        .filter(|(_, l)| l.is_hypo())
        .map(|(w, _)| w)
        .sum();
    let base = (hypo_mass / weight_total).clamp(BCE_EPS, 1.0 - BCE_EPS);
    let init_score = (base / (1.0 - base)).ln();

    // Feature columns presorted once; ties keep ascending row order.
    let sorted: Vec<Vec<u32>> = par::map_indexed(x.cols, |f| {
        let mut ids: Vec<u32> = (0..n as u32).collect();
        ids.sort_by(|&a, &b| x.row(a as usize)[f].total_cmp(&x.row(b as usize)[f]));
        ids
    });

    let mut scores = vec![init_score; n];
    let mut val_scores = vec![init_score; val_x.rows];
    let mut trees: Vec<Tree> = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_round = 0usize;
    let mut stale = 0usize;

    for round in 0..params.rounds {
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(scores[i]);
            grad[i] = weights[i] * (p - targets[i]);
            hess[i] = weights[i] * p * (1.0 - p);
        }

        let tree = grow_tree(x, &sorted, &grad, &hess, params);
        for (i, s) in scores.iter_mut().enumerate() {
            *s += tree.eval(x.row(i));
        }
        for (i, s) in val_scores.iter_mut().enumerate() {
            *s += tree.eval(val_x.row(i));
        }
        trees.push(tree);

        let val_probs: Vec<f64> = val_scores.iter().map(|&s| sigmoid(s)).collect();
        let val_loss = weighted_bce(&val_probs, val_y, &cfg.class_weights)?;
        if val_loss < best_loss {
            best_loss = val_loss;
            best_round = round;
            stale = 0;
        } else {
            stale += 1;
            if stale >= params.patience {
                break;
            }
        }
    }

    trees.truncate(best_round + 1);
    let kept = trees.len();
    Ok(TrainedModel {
        family: ModelFamily::Gbdt,
        input_cols: x.cols,
        params: ModelParams::Gbdt(GbdtModel { init_score, trees }),
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs_run: kept,
            best_val_loss: Some(best_loss),
        },
    })
}

struct Active {
    slot: usize,
    grad: f64,
    hess: f64,
}

#[derive(Clone, Copy)]
struct SplitCand {
    feature: usize,
    threshold: f64,
    gain: f64,
}

enum Decision {
    Leaf,
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

fn grow_tree(
    x: &FeatureMatrix,
    sorted: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    params: &GbdtParams,
) -> Tree {
    let n = grad.len();
    let lambda = params.lambda;
    let eta = params.learning_rate;

    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut frontier = vec![Active {
        slot: 0,
        grad: grad.iter().sum(),
        hess: hess.iter().sum(),
    }];
    // Frontier index per sample; SETTLED once its node became a leaf.
    let mut node_of: Vec<u32> = vec![0; n];

    for _ in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        let per_feature: Vec<Vec<Option<SplitCand>>> = par::map_indexed(x.cols, |f| {
            scan_feature(x, f, &sorted[f], grad, hess, &frontier, &node_of, lambda)
        });
        // Merge in feature order so ties go to the lower feature index.
        let mut best: Vec<Option<SplitCand>> = vec![None; frontier.len()];
        for cands in per_feature {
            for (slot_best, cand) in best.iter_mut().zip(cands) {
                if let Some(c) = cand {
                    if slot_best.as_ref().map_or(true, |b| c.gain > b.gain) {
                        *slot_best = Some(c);
                    }
                }
            }
        }

        let mut next: Vec<Active> = Vec::new();
        let mut decisions: Vec<Decision> = Vec::with_capacity(frontier.len());
        for (node, cand) in frontier.iter().zip(&best) {
            match cand {
                Some(c) if c.gain > MIN_GAIN => {
                    let left_slot = nodes.len();
                    nodes.push(Node::Leaf { value: 0.0 });
                    let right_slot = nodes.len();
                    nodes.push(Node::Leaf { value: 0.0 });
                    nodes[node.slot] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left: left_slot,
                        right: right_slot,
                    };
                    let left = next.len();
                    next.push(Active {
                        slot: left_slot,
                        grad: 0.0,
                        hess: 0.0,
                    });
                    let right = next.len();
                    next.push(Active {
                        slot: right_slot,
                        grad: 0.0,
                        hess: 0.0,
                    });
                    decisions.push(Decision::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right,
                    });
                }
                _ => {
                    nodes[node.slot] = Node::Leaf {
                        value: eta * leaf_value(node.grad, node.hess, lambda),
                    };
                    decisions.push(Decision::Leaf);
                }
            }
        }

        for i in 0..n {
            let fi = node_of[i];
            if fi == SETTLED {
                continue;
            }
            match decisions[fi as usize] {
                Decision::Leaf => node_of[i] = SETTLED,
                Decision::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let to = if x.row(i)[feature] < threshold { left } else { right };
                    next[to].grad += grad[i];
                    next[to].hess += hess[i];
                    node_of[i] = to as u32;
                }
            }
        }
        frontier = next;
    }

    for node in &frontier {
        nodes[node.slot] = Node::Leaf {
            value: eta * leaf_value(node.grad, node.hess, lambda),
        };
    }
    Tree { nodes }
}

fn leaf_value(grad: f64, hess: f64, lambda: f64) -> f64 {
    -grad / (hess + lambda)
}

/// Best split per frontier node along one feature. A candidate boundary
/// sits between consecutive distinct values; evaluating before the current
/// sample joins the left side keeps both children non-empty.
#[allow(clippy::too_many_arguments)]
fn scan_feature(
    x: &FeatureMatrix,
    feature: usize,
    order: &[u32],
    grad: &[f64],
    hess: &[f64],
    frontier: &[Active],
    node_of: &[u32],
    lambda: f64,
) -> Vec<Option<SplitCand>> {
    let m = frontier.len();
    let mut left_grad = vec![0.0; m];
    let mut left_hess = vec![0.0; m];
    let mut seen = vec![0usize; m];
    let mut prev = vec![0.0f64; m];
    let mut best: Vec<Option<SplitCand>> = vec![None; m];

    for &id in order {
        let i = id as usize;
        let fi = node_of[i];
        if fi == SETTLED {
            continue;
        }
        let fi = fi as usize;
        let v = x.row(i)[feature];
        if seen[fi] > 0 && v > prev[fi] {
            let node = &frontier[fi];
            let gl = left_grad[fi];
            let hl = left_hess[fi];
            let gr = node.grad - gl;
            let hr = node.hess - hl;
            let gain = 0.5
                * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda)
                    - node.grad * node.grad / (node.hess + lambda));
            if best[fi].as_ref().map_or(true, |b| gain > b.gain) {
                best[fi] = Some(SplitCand {
                    feature,
                    threshold: 0.5 * (prev[fi] + v),
                    gain,
                });
            }
        }
        left_grad[fi] += grad[i];
        left_hess[fi] += hess[i];
        seen[fi] += 1;
        prev[fi] = v;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::ClassWeights;
    use approx::assert_relative_eq;

    fn cfg() -> TrainConfig {
        TrainConfig::with_seed_and_weights(3, ClassWeights::unit())
    }

    fn matrix(values: Vec<f64>) -> FeatureMatrix {
        let rows = values.len();
        FeatureMatrix::new(rows, 1, values).unwrap()
    }

    fn labels_by_sign(values: &[f64]) -> Vec<GlycemicLabel> {
        values
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    GlycemicLabel::Hypo
                } else {
                    GlycemicLabel::Normo
                }
            })
            .collect()
    }

    #[test]
    fn first_tree_matches_hand_derivation() {
        // Unit weights, balanced targets: init score 0, p = 0.5 everywhere,
        // g = [-.5,-.5,.5,.5], h = .25. The best boundary is 1.5 with
        // gain 0.5 * (1/1.5 + 1/1.5) = 2/3 and leaves -+ G/(H + 1) = +-2/3,
        // scaled by the 0.1 learning rate.
        let x = matrix(vec![0.0, 1.0, 2.0, 3.0]);
        let y = vec![
            GlycemicLabel::Hypo,
            GlycemicLabel::Hypo,
            GlycemicLabel::Normo,
            GlycemicLabel::Normo,
        ];
        let params = GbdtParams {
            rounds: 1,
            max_depth: 1,
            ..GbdtParams::default()
        };
        let model = fit_gbdt(&x, &y, &x, &y, &params, &cfg()).unwrap();
        let ModelParams::Gbdt(m) = &model.params else {
            panic!("wrong params variant")
        };
        assert_eq!(m.init_score, 0.0);
        assert_eq!(m.trees.len(), 1);
        match m.trees[0].nodes[0] {
            Node::Split {
                feature, threshold, ..
            } => {
                assert_eq!(feature, 0);
                assert_relative_eq!(threshold, 1.5);
            }
            _ => panic!("root should split"),
        }
        let leaves: Vec<f64> = m.trees[0]
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { value } => Some(*value),
                _ => None,
            })
            .collect();
        assert_eq!(leaves.len(), 2);
        assert_relative_eq!(leaves[0], 0.1 * 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(leaves[1], -0.1 * 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn init_score_reflects_scale_pos_weight() {
        let x = matrix(vec![1.0, -1.0, -2.0, -3.0]);
        let y = labels_by_sign(&x.values);
        let params = GbdtParams {
            rounds: 1,
            ..GbdtParams::default()
        };
        let fit_with = |spw: f64| {
            let cw = ClassWeights {
                hypo: 1.0,
                normo: 1.0,
                scale_pos_weight: spw,
            };
            let c = TrainConfig::with_seed_and_weights(3, cw);
            let model = fit_gbdt(&x, &y, &x, &y, &params, &c).unwrap();
            match model.params {
                ModelParams::Gbdt(m) => m.init_score,
                _ => unreachable!(),
            }
        };
        assert_relative_eq!(fit_with(1.0), (0.25f64 / 0.75).ln(), max_relative = 1e-12);
        assert_relative_eq!(fit_with(3.0), 0.0, max_relative = 1e-12);
    }

    #[test]
    fn separable_data_is_classified_exactly() {
        let values: Vec<f64> = (0..80)
            .map(|i| if i % 2 == 0 { 1.0 + 0.01 * i as f64 } else { -1.0 - 0.01 * i as f64 })
            .collect();
        let x = matrix(values);
        let y = labels_by_sign(&x.values);
        let model = fit_gbdt(&x, &y, &x, &y, &GbdtParams::default(), &cfg()).unwrap();
        let preds = super::super::predict_proba(&model, &x).unwrap();
        for (p, label) in preds.iter().zip(&y) {
            assert_eq!(p.label, *label);
        }
    }

    #[test]
    fn worsening_validation_truncates_to_the_best_round() {
        // Validation labels are inverted, so every round that helps the
        // training data hurts validation: the first round is the best and
        // patience expires three rounds later.
        let x = matrix((0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
        let y = labels_by_sign(&x.values);
        let inverted: Vec<GlycemicLabel> = y
            .iter()
            .map(|l| {
                if l.is_hypo() {
                    GlycemicLabel::Normo
                } else {
                    GlycemicLabel::Hypo
                }
            })
            .collect();
        let params = GbdtParams {
            rounds: 50,
            patience: 3,
            ..GbdtParams::default()
        };
        let model = fit_gbdt(&x, &y, &x, &inverted, &params, &cfg()).unwrap();
        let ModelParams::Gbdt(m) = &model.params else {
            panic!("wrong params variant")
        };
        assert_eq!(m.trees.len(), 1);
        assert_eq!(model.meta.epochs_run, 1);
    }

    #[test]
    fn same_inputs_reproduce_the_model() {
        let values: Vec<f64> = (0..60).map(|i| ((i * 37) % 23) as f64 - 11.0).collect();
        let x = matrix(values);
        let y: Vec<GlycemicLabel> = (0..60)
            .map(|i| {
                if (i * 37) % 23 < 8 {
                    GlycemicLabel::Hypo
                } else {
                    GlycemicLabel::Normo
                }
            })
            .collect();
        let params = GbdtParams {
            rounds: 20,
            ..GbdtParams::default()
        };
        let a = fit_gbdt(&x, &y, &x, &y, &params, &cfg()).unwrap();
        let b = fit_gbdt(&x, &y, &x, &y, &params, &cfg()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn depth_cap_is_respected() {
        let values: Vec<f64> = (0..100).map(|i| (i as f64 * 0.77).sin() * 3.0).collect();
        let x = matrix(values);
        let y: Vec<GlycemicLabel> = (0..100)
            .map(|i| {
                if (i * 13) % 5 == 0 {
                    GlycemicLabel::Hypo
                } else {
                    GlycemicLabel::Normo
                }
            })
            .collect();
        let params = GbdtParams {
            rounds: 5,
            max_depth: 2,
            ..GbdtParams::default()
        };
        let model = fit_gbdt(&x, &y, &x, &y, &params, &cfg()).unwrap();
        let ModelParams::Gbdt(m) = &model.params else {
            panic!("wrong params variant")
        };
        assert!(m.trees.iter().all(|t| t.depth() <= 2));
    }

    #[test]
    fn bad_params_are_rejected() {
        let x = matrix(vec![1.0, -1.0]);
        let y = labels_by_sign(&x.values);
        let bad = GbdtParams {
            lambda: 0.0,
            ..GbdtParams::default()
        };
        assert!(matches!(
            fit_gbdt(&x, &y, &x, &y, &bad, &cfg()),
            Err(Error::Config(_))
        ));
    }
}
