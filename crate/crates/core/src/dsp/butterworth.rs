//! Butterworth low-pass design and zero-phase application.
//!
//! Design follows the classic analog-prototype route: unit-circle prototype
//! poles, frequency pre-warping, bilinear transform, then pairing into
//! second-order sections with each section normalized to exactly unit DC
//! gain. Zero-phase filtering averages the two pass orders
//! (forward-then-backward and backward-then-forward); the average is
//! bit-exactly time-reversal symmetric, which neither order is on its own
//! because of edge transients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub order: usize,
    /// Cutoff as a fraction of the sampling rate, in (0, 0.5).
    pub cutoff: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            order: 2,
            cutoff: 0.1,
        }
    }
}

/// One second-order section with implicit a0 = 1. First-order remainders
/// use b2 = a2 = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sos {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

/// Design the cascade for `spec`.
pub fn design_lowpass(spec: &FilterSpec) -> Result<Vec<Sos>> {
    if spec.order == 0 || spec.order > 8 {
        return Err(Error::Config(format!(
            "filter order {} out of range (1..=8)",
            spec.order
        )));
    }
    if !(spec.cutoff > 0.0 && spec.cutoff < 0.5) {
        return Err(Error::Config(format!(
            "cutoff {} must lie strictly between 0 and 0.5",
            spec.cutoff
        )));
    }

    let n = spec.order;
    let warped = 2.0 * (std::f64::consts::PI * spec.cutoff).tan();
    let mut sections = Vec::with_capacity(n.div_ceil(2));

    for k in 0..n / 2 {
        // Conjugate prototype pole pair, scaled to the warped cutoff.
        let theta = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let re = warped * theta.cos();
        let im = warped * theta.sin();
        // Bilinear transform z = (2 + p) / (2 - p).
        let denom = (2.0 - re) * (2.0 - re) + im * im;
        let zp_re = (4.0 - re * re - im * im) / denom;
        let zp_im = 4.0 * im / denom;
        let a1 = -2.0 * zp_re;
        let a2 = zp_re * zp_re + zp_im * zp_im;
        let g = (1.0 + a1 + a2) / 4.0;
        sections.push(Sos {
            b0: g,
            b1: 2.0 * g,
            b2: g,
            a1,
            a2,
        });
    }

    if n % 2 == 1 {
        // Real pole at -warped.
        let zp = (2.0 - warped) / (2.0 + warped);
        let a1 = -zp;
        let g = (1.0 + a1) / 2.0;
        sections.push(Sos {
            b0: g,
            b1: g,
            b2: 0.0,
            a1,
            a2: 0.0,
        });
    }

    for s in &sections {
        // Stability triangle; first-order sections have a2 = 0 and reduce
        // to |a1| < 1.
        if !(s.a2.abs() < 1.0 && s.a1.abs() < 1.0 + s.a2) {
            return Err(Error::Numerical(format!(
                "designed section is unstable: a1={}, a2={}",
                s.a1, s.a2
            )));
        }
    }
    Ok(sections)
}

/// One causal pass through the cascade, direct form II transposed. Section
/// states start at their unit-step steady state scaled by the segment's
/// first value, which suppresses the start-up transient for signals that
/// begin near their local level.
fn forward(sections: &[Sos], x: &[f64]) -> Vec<f64> {
    let x0 = x[0];
    let mut y = x.to_vec();
    for s in sections {
        let mut s1 = (s.b1 - s.a1 + s.b2 - s.a2) * x0;
        let mut s2 = (s.b2 - s.a2) * x0;
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b0 * xin + s1;
            s1 = s.b1 * xin - s.a1 * out + s2;
            s2 = s.b2 * xin - s.a2 * out;
            *v = out;
        }
    }
    y
}

fn reversed(x: &[f64]) -> Vec<f64> {
    x.iter().rev().copied().collect()
}

/// Zero-phase application: average of forward-then-backward and
/// backward-then-forward passes.
fn filtfilt(sections: &[Sos], x: &[f64]) -> Vec<f64> {
    let fwd_then_back = reversed(&forward(sections, &reversed(&forward(sections, x))));
    let back = reversed(&forward(sections, &reversed(x)));
    let back_then_fwd = forward(sections, &back);
    fwd_then_back
        .iter()
        .zip(&back_then_fwd)
        .map(|(a, b)| 0.5 * (a + b))
        .collect()
}

/// Single causal pass over a dense signal; used to measure the magnitude
/// response, which zero-phase application would square.
pub fn sosfilt_forward(spec: &FilterSpec, x: &[f64]) -> Result<Vec<f64>> {
    let sections = design_lowpass(spec)?;
    if x.is_empty() {
        return Ok(Vec::new());
    }
    Ok(forward(&sections, x))
}

/// Zero-phase low-pass over a gappy signal. Each contiguous present run is
/// filtered independently; runs shorter than three times the filter order
/// pass through unchanged. Missing slots stay missing.
pub fn butterworth_lowpass(values: &[Option<f64>], spec: &FilterSpec) -> Result<Vec<Option<f64>>> {
    let sections = design_lowpass(spec)?;
    let min_len = 3 * spec.order;
    let mut out = values.to_vec();
    let mut k = 0usize;
    while k < values.len() {
        if values[k].is_none() {
            k += 1;
            continue;
        }
        let seg_start = k;
        while k < values.len() && values[k].is_some() {
            k += 1;
        }
        let seg: Vec<f64> = values[seg_start..k].iter().map(|v| v.unwrap()).collect();
        if seg.len() < min_len {
            continue;
        }
        let filtered = filtfilt(&sections, &seg);
        for (slot, v) in out[seg_start..k].iter_mut().zip(filtered) {
            if !v.is_finite() {
                return Err(Error::Numerical(
                    "non-finite value out of zero-phase filter".into(),
                ));
            }
            *slot = Some(v);
        }
    }
    Ok(out)
}
