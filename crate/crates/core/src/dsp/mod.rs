//! Signal preprocessing: grid alignment, outlier masking, zero-phase
//! low-pass filtering and per-subject standardization of the GSR channel.
//!
//! A subject's channels become a [`UniformSeries`] on a 5-minute grid, then
//! advance through the [`Stage`]s in a fixed order. The stage marker is
//! checked at every transition so a pipeline bug (say, standardizing before
//! filtering) fails loudly instead of silently degrading the features.

mod butterworth;
mod grid;
mod robust;
mod zscore;

pub use butterworth::{butterworth_lowpass, design_lowpass, sosfilt_forward, FilterSpec, Sos};
pub use grid::align_to_grid;
pub use robust::{iqr_mask, quantile};
pub use zscore::zscore;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Cohort, SubjectRecord};

/// Grid period: one CGM step.
pub const GRID_MINUTES: i64 = 5;

/// Preprocessing pipeline position, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Aligned,
    Masked,
    Filtered,
    Standardized,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Aligned => "aligned",
            Stage::Masked => "masked",
            Stage::Filtered => "filtered",
            Stage::Standardized => "standardized",
        };
        write!(f, "{s}")
    }
}

/// Both channels of one subject resampled onto the shared grid. `None`
/// marks a grid slot with no usable reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformSeries {
    pub subject_id: String,
    pub start: DateTime<Utc>,
    pub glucose: Vec<Option<f64>>,
    pub gsr: Vec<Option<f64>>,
    pub stage: Stage,
}

impl UniformSeries {
    pub fn len(&self) -> usize {
        self.glucose.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glucose.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(GRID_MINUTES * index as i64)
    }

    fn expect_stage(&self, expected: Stage, to: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::StageOrder {
                from: self.stage.to_string(),
                to: to.to_string(),
            });
        }
        Ok(())
    }
}

/// Knobs for the per-subject preprocessing chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Longest run of missing GSR grid slots bridged by linear interpolation.
    pub max_gap: usize,
    /// IQR fence multiplier for outlier masking.
    pub iqr_k: f64,
    pub filter: FilterSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            max_gap: 3,
            iqr_k: 1.5,
            filter: FilterSpec::default(),
        }
    }
}

/// Mask GSR outliers in place (stage `Aligned` -> `Masked`).
pub fn mask_outliers(series: &mut UniformSeries, k: f64) -> Result<()> {
    series.expect_stage(Stage::Aligned, Stage::Masked)?;
    series.gsr = iqr_mask(&series.gsr, k)?;
    series.stage = Stage::Masked;
    Ok(())
}

/// Zero-phase low-pass the GSR channel in place (stage `Masked` -> `Filtered`).
pub fn filter_gsr(series: &mut UniformSeries, spec: &FilterSpec) -> Result<()> {
    series.expect_stage(Stage::Masked, Stage::Filtered)?;
    series.gsr = butterworth_lowpass(&series.gsr, spec)?;
    series.stage = Stage::Filtered;
    Ok(())
}

/// Z-score the GSR channel in place (stage `Filtered` -> `Standardized`).
pub fn standardize_gsr(series: &mut UniformSeries) -> Result<()> {
    series.expect_stage(Stage::Filtered, Stage::Standardized)?;
    series.gsr = zscore(&series.gsr)?;
    series.stage = Stage::Standardized;
    Ok(())
}

/// Run the full chain for one subject. Errors carry the subject id.
pub fn preprocess_subject(record: &SubjectRecord, cfg: &PreprocessConfig) -> Result<UniformSeries> {
    let inner = |record: &SubjectRecord| -> Result<UniformSeries> {
        let mut series = align_to_grid(record, cfg.max_gap)?;
        mask_outliers(&mut series, cfg.iqr_k)?;
        filter_gsr(&mut series, &cfg.filter)?;
        standardize_gsr(&mut series)?;
        Ok(series)
    };
    inner(record).map_err(|e| e.for_subject(&record.subject_id))
}

/// Preprocess every subject, fanning out across subjects.
pub fn preprocess_cohort(cohort: &Cohort, cfg: &PreprocessConfig) -> Result<Vec<UniformSeries>> {
    crate::par::try_map_slice(&cohort.subjects, |record| preprocess_subject(record, cfg))
}

/// Debug/inspection dump of a series as CSV.
pub fn write_series_csv(series: &UniformSeries) -> String {
    let mut out = String::from("timestamp,glucose,gsr,stage\n");
    for i in 0..series.len() {
        let g = series.glucose[i].map(|v| v.to_string()).unwrap_or_default();
        let e = series.gsr[i].map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{g},{e},{}\n",
            crate::ingest::format_timestamp(series.timestamp(i)),
            series.stage
        ));
    }
    out
}
