//! Weighted logistic regression trained full-batch with Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::fixed_chunks;
use crate::windowing::GlycemicLabel;

use super::adam::AdamState;
use super::loss::{sigmoid, weighted_bce, BCE_EPS};
use super::{
    labels_to_targets, require_both_classes, FeatureMatrix, ModelFamily, ModelParams,
    TrainConfig, TrainedModel, TrainingMeta,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogregModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogregModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.rows)
            .map(|r| {
                let z: f64 = x
                    .row(r)
                    .iter()
                    .zip(&self.weights)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + self.bias;
                sigmoid(z)
            })
            .collect()
    }
}

/// Gradient-norm threshold for early convergence exit.
const GRAD_TOL: f64 = 1e-6;

/// Fit from zero-initialized parameters; `cfg.max_epochs` counts full-batch
/// Adam steps. Deterministic (the seed only labels metadata).
pub fn fit_logreg(
    x: &FeatureMatrix,
    y: &[GlycemicLabel],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    require_both_classes(y)?;
    let d = x.cols;
    let targets = labels_to_targets(y);
    let sample_w: Vec<f64> = y.iter().map(|&l| cfg.class_weights.weight_for(l)).collect();

    let mut params = vec![vec![0.0; d], vec![0.0; 1]];
    let mut adam = AdamState::new(&[d, 1]);
    let mut steps = 0usize;

    for _ in 0..cfg.max_epochs {
        let (_, grad_w, grad_b) =
            logreg_loss_and_grad(x, &targets, &sample_w, &params[0], params[1][0], cfg.l2)?;
        let norm: f64 = grad_w
            .iter()
            .chain(std::iter::once(&grad_b))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm < GRAD_TOL {
            break;
        }
        let grads = vec![grad_w, vec![grad_b]];
        adam.step(&mut params, &grads, cfg.learning_rate)?;
        steps += 1;
    }

    let model = LogregModel {
        weights: params[0].clone(),
        bias: params[1][0],
    };
    let train_loss = weighted_bce(&model.predict(x), y, &cfg.class_weights)?;
    Ok(TrainedModel {
        family: ModelFamily::Logreg,
        input_cols: d,
        params: ModelParams::Logreg(model),
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs_run: steps,
            best_val_loss: Some(train_loss),
        },
    })
}

/// Loss and gradient at explicit parameters: the sample-weighted mean BCE
/// plus an L2 term on the weights (never the bias). Public so gradients can
/// be checked against finite differences of the same function.
///
/// Both values accumulate over fixed chunks in index order, so they are
/// bit-identical across thread counts.
pub fn logreg_loss_and_grad(
    x: &FeatureMatrix,
    targets: &[f64],
    sample_w: &[f64],
    weights: &[f64],
    bias: f64,
    l2: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    if targets.len() != x.rows || sample_w.len() != x.rows || weights.len() != x.cols {
        return Err(Error::Shape(format!(
            "logreg loss over {} rows x {} cols got {} targets, {} sample weights, {} weights",
            x.rows,
            x.cols,
            targets.len(),
            sample_w.len(),
            weights.len()
        )));
    }
    if x.rows == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let d = x.cols;
    let n = x.rows as f64;
    let chunks = fixed_chunks(x.rows);
    let partials: Vec<(f64, Vec<f64>, f64)> = crate::par::map_slice(&chunks, |range| {
        let mut loss = 0.0;
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for r in range.clone() {
            let z: f64 = x
                .row(r)
                .iter()
                .zip(weights)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + bias;
            let p = sigmoid(z);
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let term = if targets[r] > 0.5 { -pc.ln() } else { -(1.0 - pc).ln() };
            loss += sample_w[r] * term / n;
            let residual = sample_w[r] * (p - targets[r]) / n;
            for (g, v) in gw.iter_mut().zip(x.row(r)) {
                *g += residual * v;
            }
            gb += residual;
        }
        (loss, gw, gb)
    });
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; d];
    let mut grad_b = 0.0;
    for (pl, gw, gb) in partials {
        loss += pl;
        for (acc, g) in grad_w.iter_mut().zip(gw) {
            *acc += g;
        }
        grad_b += gb;
    }
    if l2 > 0.0 {
        loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
        for (g, w) in grad_w.iter_mut().zip(weights) {
            *g += l2 * w;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite logistic loss".into()));
    }
    Ok((loss, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::ClassWeights;

    fn separable_fixture() -> (FeatureMatrix, Vec<GlycemicLabel>) {
        // One feature, classes split at 0 with a margin.
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let offset = (i % 10) as f64 * 0.05;
            if i % 2 == 0 {
                values.push(1.0 + offset);
                labels.push(GlycemicLabel::Hypo);
            } else {
                values.push(-1.0 - offset);
                labels.push(GlycemicLabel::Normo);
            }
        }
        (FeatureMatrix::new(40, 1, values).unwrap(), labels)
    }

    #[test]
    fn separates_a_separable_problem() {
        let (x, y) = separable_fixture();
        let cfg = TrainConfig {
            max_epochs: 2000,
            ..TrainConfig::with_seed_and_weights(1, ClassWeights::unit())
        };
        let model = fit_logreg(&x, &y, &cfg).unwrap();
        let preds = super::super::predict_proba(&model, &x).unwrap();
        for (p, label) in preds.iter().zip(&y) {
            assert_eq!(p.label, *label);
        }
    }

    #[test]
    fn loss_is_monotone_after_warmup_on_separable_data() {
        let (x, y) = separable_fixture();
        let targets = labels_to_targets(&y);
        let w = vec![1.0; y.len()];
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::with_seed_and_weights(1, ClassWeights::unit())
        };
        // Re-fit step by step, recording the loss trajectory.
        let mut losses = Vec::new();
        for steps in 1..=60 {
            let c = TrainConfig {
                max_epochs: steps,
                ..cfg.clone()
            };
            let m = fit_logreg(&x, &y, &c).unwrap();
            if let ModelParams::Logreg(lm) = &m.params {
                let (loss, _, _) =
                    logreg_loss_and_grad(&x, &targets, &w, &lm.weights, lm.bias, 0.0).unwrap();
                losses.push(loss);
            }
        }
        for t in 10..losses.len() - 1 {
            assert!(
                losses[t + 1] <= losses[t] + 1e-12,
                "loss rose at step {}: {} -> {}",
                t,
                losses[t],
                losses[t + 1]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        for seed in 0..5u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows = 9;
            let cols = 3;
            let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = FeatureMatrix::new(rows, cols, values).unwrap();
            let targets: Vec<f64> = (0..rows).map(|i| (i % 2) as f64).collect();
            let sample_w: Vec<f64> = (0..rows).map(|i| 0.5 + (i % 3) as f64).collect();
            let mut weights: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias = rng.gen_range(-0.5..0.5);
            let l2 = 0.03;

            let (_, gw, gb) =
                logreg_loss_and_grad(&x, &targets, &sample_w, &weights, bias, l2).unwrap();
            let h = 1e-5;
            let check = |analytic: f64, up: f64, down: f64| {
                let fd = (up - down) / (2.0 * h);
                let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed}: rel err {rel}");
            };
            for j in 0..cols {
                let orig = weights[j];
                weights[j] = orig + h;
                let up = logreg_loss_and_grad(&x, &targets, &sample_w, &weights, bias, l2)
                    .unwrap()
                    .0;
                weights[j] = orig - h;
                let down = logreg_loss_and_grad(&x, &targets, &sample_w, &weights, bias, l2)
                    .unwrap()
                    .0;
                weights[j] = orig;
                check(gw[j], up, down);
            }
            let up = logreg_loss_and_grad(&x, &targets, &sample_w, &weights, bias + h, l2)
                .unwrap()
                .0;
            let down = logreg_loss_and_grad(&x, &targets, &sample_w, &weights, bias - h, l2)
                .unwrap()
                .0;
            check(gb, up, down);
        }
    }

    #[test]
    fn heavier_hypo_weight_never_hurts_hypo_recall() {
        // Overlapping classes; recall measured on the training set.
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let x = (i as f64 * 0.831).sin() * 2.0;
            let is_hypo = i % 7 == 0;
            values.push(x + if is_hypo { 0.8 } else { -0.2 });
            labels.push(if is_hypo {
                GlycemicLabel::Hypo
            } else {
                GlycemicLabel::Normo
            });
        }
        let x = FeatureMatrix::new(200, 1, values).unwrap();
        let recall_at = |hypo_weight: f64| -> f64 {
            let cw = ClassWeights {
                hypo: hypo_weight,
                normo: 1.0,
                scale_pos_weight: 1.0,
            };
            let cfg = TrainConfig {
                max_epochs: 1500,
                ..TrainConfig::with_seed_and_weights(1, cw)
            };
            let m = fit_logreg(&x, &labels, &cfg).unwrap();
            let preds = super::super::predict_proba(&m, &x).unwrap();
            let tp = preds
                .iter()
                .zip(&labels)
                .filter(|(p, l)| l.is_hypo() && p.label.is_hypo())
                .count();
            tp as f64 / labels.iter().filter(|l| l.is_hypo()).count() as f64
        };
        let base = recall_at(1.0);
        let doubled = recall_at(2.0);
        let heavy = recall_at(8.0);
        assert!(doubled >= base - 1e-12, "{doubled} < {base}");
        assert!(heavy >= doubled - 1e-12, "{heavy} < {doubled}");
    }
}
