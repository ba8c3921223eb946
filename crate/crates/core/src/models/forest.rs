//! Random forest with class-weighted Gini splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::tree::{Node, Tree};
use crate::models::{
    require_both_classes, FeatureMatrix, ModelFamily, ModelParams, TrainConfig, TrainedModel,
    TrainingMeta,
};
use crate::par;
use crate::seed::derive_seed;
use crate::windowing::GlycemicLabel;

const MIN_GINI_DECREASE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_split: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 6,
            min_split: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub input_cols: usize,
}

impl ForestModel {
    /// Mean of the per-tree leaf probabilities.
    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        par::map_indexed(x.rows, |r| {
            let row = x.row(r);
            let sum: f64 = self.trees.iter().map(|t| t.eval(row)).sum();
            sum / self.trees.len() as f64
        })
    }
}

/// Gini impurity of a histogram of non-negative class masses.
pub fn gini_impurity(class_masses: &[f64]) -> Result<f64> {
    if class_masses.iter().any(|&m| !m.is_finite() || m < 0.0) {
        return Err(Error::InvalidSplit(
            "class masses must be finite and non-negative".into(),
        ));
    }
    let total: f64 = class_masses.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidSplit("empty class histogram".into()));
    }
    let sq: f64 = class_masses.iter().map(|m| (m / total).powi(2)).sum();
    Ok(1.0 - sq)
}

pub fn fit_random_forest(
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    params: &ForestParams,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if x.rows != y.len() {
        return Err(Error::Shape(format!(
            "feature rows {} != label count {}",
            x.rows,
            y.len()
        )));
    }
    if params.n_trees == 0 || params.max_depth == 0 {
        return Err(Error::Config(
            "forest needs at least one tree and depth one".into(),
        ));
    }
    require_both_classes(y)?;

    let weights: Vec<f64> = y.iter().map(|&l| cfg.class_weights.weight_for(l)).collect();
    let m_try = ((x.cols as f64).sqrt().floor() as usize).max(1);

    let trees = par::map_indexed(params.n_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("tree:{t}")));
        grow_tree(x, y, &weights, params, m_try, &mut rng)
    });

    Ok(TrainedModel {
        family: ModelFamily::RandomForest,
        input_cols: x.cols,
        params: ModelParams::Forest(ForestModel {
            trees,
            input_cols: x.cols,
        }),
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs_run: params.n_trees,
            best_val_loss: None,
        },
    })
}

struct Frame {
    samples: Vec<usize>,
    depth: usize,
    slot: usize,
}

fn grow_tree(
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    weights: &[f64],
    params: &ForestParams,
    m_try: usize,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let n = x.rows;
    let bootstrap: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();

    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![Frame {
        samples: bootstrap,
        depth: 0,
        slot: 0,
    }];
    let mut feature_pool: Vec<usize> = (0..x.cols).collect();

    while let Some(frame) = stack.pop() {
        let (hypo_mass, total_mass) = node_masses(y, weights, &frame.samples);
        let prob = hypo_mass / total_mass;
        let pure = hypo_mass == 0.0 || hypo_mass == total_mass;

        if frame.depth >= params.max_depth || frame.samples.len() < params.min_split || pure {
            nodes[frame.slot] = Node::Leaf { value: prob };
            continue;
        }

        feature_pool.shuffle(rng);
        let best = feature_pool[..m_try]
            .iter()
            .filter_map(|&f| best_split_on(x, y, weights, &frame.samples, f))
            .fold(None::<Candidate>, |acc, cand| match acc {
                Some(best) if best.decrease >= cand.decrease => Some(best),
                _ => Some(cand),
            });

        let Some(cand) = best else {
            nodes[frame.slot] = Node::Leaf { value: prob };
            continue;
        };

        let (left, right): (Vec<usize>, Vec<usize>) = frame
            .samples
            .iter()
            .partition(|&&i| x.row(i)[cand.feature] < cand.threshold);

        let left_slot = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        let right_slot = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[frame.slot] = Node::Split {
            feature: cand.feature,
            threshold: cand.threshold,
            left: left_slot,
            right: right_slot,
        };
        stack.push(Frame {
            samples: right,
            depth: frame.depth + 1,
            slot: right_slot,
        });
        stack.push(Frame {
            samples: left,
            depth: frame.depth + 1,
            slot: left_slot,
        });
    }

    Tree { nodes }
}

fn node_masses(y: &[GlycemicLabel], weights: &[f64], samples: &[usize]) -> (f64, f64) {
    let mut hypo = 0.0;
    let mut total = 0.0;
    for &i in samples {
        total += weights[i];
        if y[i] == GlycemicLabel::Hypo {
            hypo += weights[i];
        }
    }
    (hypo, total)
}

struct Candidate {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

/// Best midpoint threshold on one feature by weighted Gini decrease,
/// or `None` when the node is constant along it.
fn best_split_on(
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    weights: &[f64],
    samples: &[usize],
    feature: usize,
) -> Option<Candidate> {
    let mut order: Vec<(f64, f64, bool)> = samples
        .iter()
        .map(|&i| {
            (
                x.row(i)[feature],
                weights[i],
                y[i] == GlycemicLabel::Hypo,
            )
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let total: f64 = order.iter().map(|s| s.1).sum();
    let total_hypo: f64 = order.iter().filter(|s| s.2).map(|s| s.1).sum();
    let parent = gini(total_hypo, total);

    let mut left = 0.0;
    let mut left_hypo = 0.0;
    let mut best: Option<Candidate> = None;
    for pair in order.windows(2) {
        left += pair[0].1;
        if pair[0].2 {
            left_hypo += pair[0].1;
        }
        if pair[0].0 >= pair[1].0 {
            continue;
        }
        let right = total - left;
        let child = (left * gini(left_hypo, left) + right * gini(total_hypo - left_hypo, right))
            / total;
        let decrease = parent - child;
        if decrease > MIN_GINI_DECREASE
            && best.as_ref().map_or(true, |b| decrease > b.decrease)
        {
            best = Some(Candidate {
                feature,
                threshold: 0.5 * (pair[0].0 + pair[1].0),
                decrease,
            });
        }
    }
    best
}

fn gini(hypo_mass: f64, total_mass: f64) -> f64 {
    if total_mass <= 0.0 {
        return 0.0;
    }
    let p = hypo_mass / total_mass;
    2.0 * p * (1.0 - p)
}
