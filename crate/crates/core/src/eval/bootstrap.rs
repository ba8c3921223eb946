//! Stratified-bootstrap percentile confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::quantile;
use crate::error::{Error, Result};
use crate::eval::metrics::{metric_value, Metric};
use crate::par;
use crate::seed::derive_seed;
use crate::windowing::GlycemicLabel;

/// Percentile bootstrap interval. Iterations where the metric came out 0/0
/// are excluded from the percentiles and counted here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub iterations: usize,
    pub seed: u64,
    pub undefined_iterations: usize,
}

/// Bootstrap a metric by resampling with replacement within each class
/// stratum, preserving the per-class counts. Iterations draw from seeds
/// derived per index, so the parallel result equals the serial one.
pub fn stratified_bootstrap_ci(
    scores: &[f64],
    predictions: &[GlycemicLabel],
    labels: &[GlycemicLabel],
    metric: Metric,
    iterations: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceInterval> {
    if scores.len() != labels.len() || predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores and {} predictions for {} labels",
            scores.len(),
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if iterations == 0 {
        return Err(Error::Config("bootstrap needs at least one iteration".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level {level} must lie in (0, 1)"
        )));
    }

    let hypo: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_hypo()).collect();
    let normo: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_hypo()).collect();
    if metric.is_class_conditional() && (hypo.is_empty() || normo.is_empty()) {
        return Err(Error::InsufficientClass(format!(
            "{} bootstrap needs both classes, got {} hypo and {} normo",
            metric.key(),
            hypo.len(),
            normo.len()
        )));
    }
    let strata: Vec<&[usize]> = [hypo.as_slice(), normo.as_slice()]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();

    let outcomes: Vec<Result<Option<f64>>> = par::map_indexed(iterations, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("iter:{i}")));
        let mut s = Vec::with_capacity(labels.len());
        let mut p = Vec::with_capacity(labels.len());
        let mut y = Vec::with_capacity(labels.len());
        for stratum in &strata {
            for _ in 0..stratum.len() {
                let k = stratum[rng.gen_range(0..stratum.len())];
                s.push(scores[k]);
                p.push(predictions[k]);
                y.push(labels[k]);
            }
        }
        metric_value(metric, &s, &p, &y)
    });

    let mut values = Vec::with_capacity(iterations);
    let mut undefined = 0usize;
    for outcome in outcomes {
        match outcome? {
            Some(v) => values.push(v),
            None => undefined += 1,
        }
    }
    if undefined * 2 > iterations {
        return Err(Error::UnstableMetric {
            undefined,
            iterations,
        });
    }

    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        low: quantile(&values, alpha),
        high: quantile(&values, 1.0 - alpha),
        level,
        iterations,
        seed,
        undefined_iterations: undefined,
    })
}
