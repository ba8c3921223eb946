//! Weighted binary cross-entropy.

use crate::error::{Error, Result};
use crate::windowing::{ClassWeights, GlycemicLabel};

/// Probability clip applied inside the log terms.
pub(crate) const BCE_EPS: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of per-example weighted cross-entropy terms, with probabilities
/// clipped away from 0 and 1. Hypo is the positive class.
pub fn weighted_bce(
    probabilities: &[f64],
    labels: &[GlycemicLabel],
    weights: &ClassWeights,
) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for (&p, &label) in probabilities.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Numerical(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let term = if label.is_hypo() { -pc.ln() } else { -(1.0 - pc).ln() };
        total += weights.weight_for(label) * term;
    }
    let loss = total / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok(loss)
}
