//! Synthetic cohort generator.
//!
//! Each subject gets a CGM trace on a 5-minute grid and a GSR trace on a
//! 1-minute grid. Glucose is a bounded mean-reverting walk that never drops
//! below 90 on its own; hypoglycemic excursions are injected explicitly so
//! the number of sub-70 steps per subject is exactly
//! `round(target_prevalence * steps_per_subject)`. GSR is a slow sinusoidal
//! drift plus white noise, plus a hat-shaped rise that starts `lead_steps`
//! grid steps before each excursion and scales with `coupling`; at
//! `coupling = 0` the GSR trace carries no information about the labels.

use chrono::{Duration, TimeZone, Utc};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

use super::{Cohort, SourceTag, SubjectRecord, TimedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// CGM grid steps per subject (one step = 5 minutes).
    pub steps_per_subject: usize,
    /// Fraction of grid steps with glucose below 70.
    pub target_prevalence: f64,
    /// Strength of the GSR response to excursions; 0 decouples the channels.
    pub coupling: f64,
    /// Standard deviation of white noise on each 1-minute GSR sample.
    pub noise_sd: f64,
    /// Grid steps by which the GSR rise precedes each excursion.
    pub lead_steps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 12,
            steps_per_subject: 4200,
            target_prevalence: 0.041,
            coupling: 0.8,
            noise_sd: 0.15,
            lead_steps: 2,
            seed: 7,
        }
    }
}

/// Peak GSR rise (µS) at coupling 1.0.
const RISE_AMPLITUDE: f64 = 1.2;
/// GSR rise decay tail after an excursion ends, in minutes.
const DECAY_MINUTES: f64 = 15.0;
const GSR_BASE: f64 = 2.0;

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be at least 1".into()));
        }
        if self.steps_per_subject < 60 {
            return Err(Error::Config(
                "steps_per_subject must be at least 60".into(),
            ));
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 0.5) {
            return Err(Error::Config(
                "target_prevalence must be in (0, 0.5)".into(),
            ));
        }
        if self.target_prevalence * self.steps_per_subject as f64 <= 0.5 {
            return Err(Error::Config(format!(
                "target_prevalence {} over {} steps yields fewer than one expected excursion step",
                self.target_prevalence, self.steps_per_subject
            )));
        }
        if !self.coupling.is_finite() || self.coupling < 0.0 {
            return Err(Error::Config("coupling must be finite and >= 0".into()));
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::Config("noise_sd must be finite and >= 0".into()));
        }
        if self.lead_steps > 6 {
            return Err(Error::Config("lead_steps must be at most 6".into()));
        }
        Ok(())
    }
}

/// Generate a cohort. Identical configs produce bit-identical cohorts; each
/// subject draws from its own seed stream derived from `cfg.seed`.
pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let subjects = crate::par::try_map_slice(
        &(0..cfg.n_subjects).collect::<Vec<usize>>(),
        |&i| generate_subject(cfg, i),
    )?;
    let mut cohort = Cohort::new(subjects);
    cohort.total_steps = cfg.n_subjects * cfg.steps_per_subject;
    Ok(cohort)
}

struct Excursion {
    /// First sub-70 grid step.
    start: usize,
    /// Number of sub-70 steps.
    len: usize,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn generate_subject(cfg: &SynthConfig, index: usize) -> Result<SubjectRecord> {
    let seed = derive_seed(cfg.seed, &format!("subject:{index}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = cfg.steps_per_subject;
    let start = Utc.with_ymd_and_hms(2022, 3, 1, 0, 0, 0).unwrap() + Duration::days(index as i64);

    // Base glucose: mean-reverting walk bounded well above the threshold.
    let mut glucose = vec![0.0f64; steps];
    glucose[0] = (140.0 + 5.0 * standard_normal(&mut rng)).clamp(120.0, 160.0);
    for t in 1..steps {
        let drift = 0.05 * (140.0 - glucose[t - 1]);
        let step = drift + 6.0 * standard_normal(&mut rng);
        glucose[t] = (glucose[t - 1] + step).clamp(90.0, 320.0);
    }

    let target_hypo = (cfg.target_prevalence * steps as f64).round() as usize;
    let excursions = plan_excursions(cfg, steps, target_hypo, &mut rng)?;
    for e in &excursions {
        glucose[e.start - 2] = rng.gen_range(82.0..90.0);
        glucose[e.start - 1] = rng.gen_range(71.5..75.0);
        for j in 0..e.len {
            glucose[e.start + j] = rng.gen_range(52.0..66.0);
        }
        glucose[e.start + e.len] = rng.gen_range(71.5..75.0);
        glucose[e.start + e.len + 1] = rng.gen_range(82.0..90.0);
    }
    debug_assert_eq!(glucose.iter().filter(|&&g| g < 70.0).count(), target_hypo);

    let glucose_samples: Vec<TimedSample> = glucose
        .iter()
        .enumerate()
        .map(|(t, &g)| TimedSample::new(start + Duration::minutes(5 * t as i64), g))
        .collect();

    // GSR: slow drift + excursion-coupled rises + white noise, one sample a
    // minute across the whole grid span.
    let phase1 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase2 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amplitude = cfg.coupling * RISE_AMPLITUDE;
    let total_minutes = steps * 5;
    let mut gsr_samples: Vec<TimedSample> = Vec::with_capacity(total_minutes);
    for minute in 0..total_minutes {
        let tau = minute as f64;
        let drift = 0.8 * (std::f64::consts::TAU * tau / 720.0 + phase1).sin()
            + 0.3 * (std::f64::consts::TAU * tau / 173.0 + phase2).sin();
        let mut rise = 0.0;
        for e in &excursions {
            let up_start = 5.0 * (e.start as f64 - cfg.lead_steps as f64);
            let plateau_start = 5.0 * e.start as f64;
            let plateau_end = 5.0 * (e.start + e.len) as f64;
            if tau >= up_start && tau < plateau_start {
                rise += amplitude * (tau - up_start) / (plateau_start - up_start);
            } else if tau >= plateau_start && tau < plateau_end {
                rise += amplitude;
            } else if tau >= plateau_end && tau < plateau_end + DECAY_MINUTES {
                rise += amplitude * (1.0 - (tau - plateau_end) / DECAY_MINUTES);
            }
        }
        let value = GSR_BASE + drift + rise + cfg.noise_sd * standard_normal(&mut rng);
        gsr_samples.push(TimedSample::new(start + Duration::minutes(minute as i64), value));
    }

    SubjectRecord::new(
        format!("synth-{:02}", index + 1),
        glucose_samples,
        gsr_samples,
        SourceTag::Synthetic,
    )
}

/// Choose non-overlapping excursions whose sub-70 step counts sum to
/// exactly `target_hypo`.
fn plan_excursions(
    cfg: &SynthConfig,
    steps: usize,
    target_hypo: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Excursion>> {
    let mut lengths: Vec<usize> = Vec::new();
    let mut remaining = target_hypo;
    while remaining > 0 {
        if remaining < 3 {
            // Absorb a short tail into the last event, or allow one short
            // event when the target itself is tiny.
            match lengths.last_mut() {
                Some(last) => *last += remaining,
                None => lengths.push(remaining),
            }
            remaining = 0;
        } else {
            let len = rng.gen_range(3..=12).min(remaining);
            lengths.push(len);
            remaining -= len;
        }
    }

    // Reserve a margin around each event: the pre-rise and down-ramp before
    // it, the recovery ramp and GSR decay after it.
    let before = cfg.lead_steps.max(2) + 2;
    let after = 2 + (DECAY_MINUTES as usize).div_ceil(5) + 1;
    let mut reserved: Vec<(usize, usize)> = Vec::new();
    let mut excursions: Vec<Excursion> = Vec::new();
    for &len in &lengths {
        let hi = steps.checked_sub(len + after).filter(|&h| h > before).ok_or_else(|| {
            Error::Config(format!(
                "steps_per_subject {steps} too small for an excursion of {len} steps"
            ))
        })?;
        let mut placed = false;
        for _ in 0..10_000 {
            let s = rng.gen_range(before..hi);
            let lo = s - before;
            let hi_end = s + len + after;
            if reserved.iter().all(|&(a, b)| hi_end <= a || lo >= b) {
                reserved.push((lo, hi_end));
                excursions.push(Excursion { start: s, len });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {} excursion steps into {steps} grid steps; \
                 lower target_prevalence or raise steps_per_subject",
                target_hypo
            )));
        }
    }
    excursions.sort_by_key(|e| e.start);
    Ok(excursions)
}
