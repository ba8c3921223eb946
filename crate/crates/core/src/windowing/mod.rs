//! Labeled sliding windows over standardized series, leakage-safe splits,
//! and the class-imbalance machinery (weights and balanced batches).

mod sampler;
mod split;

pub use sampler::{shuffled_batches, BalancedBatchSampler};
pub use split::{stratified_split, SplitAssignment};

use serde::{Deserialize, Serialize};

use crate::dsp::{Stage, UniformSeries};
use crate::error::{Error, Result};

/// Clinical hypoglycemia threshold in mg/dL.
pub const HYPO_THRESHOLD: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlycemicLabel {
    Hypo,
    Normo,
}

impl GlycemicLabel {
    pub fn is_hypo(self) -> bool {
        self == GlycemicLabel::Hypo
    }
}

impl std::fmt::Display for GlycemicLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GlycemicLabel::Hypo => write!(f, "hypo"),
            GlycemicLabel::Normo => write!(f, "normo"),
        }
    }
}

/// Label a glucose reading against an explicit threshold.
pub fn label_glucose_at(glucose: f64, threshold: f64) -> Result<GlycemicLabel> {
    if !glucose.is_finite() || glucose <= 0.0 {
        return Err(Error::InvalidGlucose(glucose));
    }
    if glucose < threshold {
        Ok(GlycemicLabel::Hypo)
    } else {
        Ok(GlycemicLabel::Normo)
    }
}

/// Label a glucose reading against the clinical 70 mg/dL threshold.
pub fn label_glucose(glucose: f64) -> Result<GlycemicLabel> {
    label_glucose_at(glucose, HYPO_THRESHOLD)
}

/// One sliding window: `width` standardized GSR steps and the label of the
/// glucose reading at the window's final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub subject_id: String,
    /// Grid index of the first step.
    pub start_index: usize,
    pub gsr_seq: Vec<f64>,
    pub glucose_final: f64,
    pub label: GlycemicLabel,
}

impl LabeledWindow {
    pub fn width(&self) -> usize {
        self.gsr_seq.len()
    }

    /// Grid index of the final (labeled) step.
    pub fn end_index(&self) -> usize {
        self.start_index + self.gsr_seq.len() - 1
    }

    /// Collapse the sequence to its mean, the static ablation feature.
    pub fn static_feature(&self) -> f64 {
        self.gsr_seq.iter().sum::<f64>() / self.gsr_seq.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub width: usize,
    pub stride: usize,
    pub label_threshold: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            width: 12,
            stride: 1,
            label_threshold: HYPO_THRESHOLD,
        }
    }
}

impl WindowConfig {
    fn validate(&self) -> Result<()> {
        if self.width < 2 {
            return Err(Error::Config("window width must be at least 2".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("window stride must be at least 1".into()));
        }
        if !(self.label_threshold.is_finite() && self.label_threshold > 0.0) {
            return Err(Error::Config(format!(
                "label threshold {} must be finite and positive",
                self.label_threshold
            )));
        }
        Ok(())
    }
}

/// Cut sliding windows from a standardized series. A window is emitted only
/// when every GSR step is present and the final glucose reading exists; a
/// series shorter than `width` yields no windows.
pub fn make_windows(series: &UniformSeries, cfg: &WindowConfig) -> Result<Vec<LabeledWindow>> {
    cfg.validate()?;
    if series.stage != Stage::Standardized {
        return Err(Error::StageOrder {
            from: series.stage.to_string(),
            to: "windowing".into(),
        });
    }
    let mut out = Vec::new();
    if series.len() < cfg.width {
        return Ok(out);
    }
    let mut start = 0usize;
    while start + cfg.width <= series.len() {
        let end = start + cfg.width - 1;
        let gsr = &series.gsr[start..=end];
        if let (true, Some(glucose)) = (gsr.iter().all(Option::is_some), series.glucose[end]) {
            let label = label_glucose_at(glucose, cfg.label_threshold)?;
            out.push(LabeledWindow {
                subject_id: series.subject_id.clone(),
                start_index: start,
                gsr_seq: gsr.iter().map(|v| v.unwrap()).collect(),
                glucose_final: glucose,
                label,
            });
        }
        start += cfg.stride;
    }
    Ok(out)
}

/// Inverse-frequency class weights `n / (2 * n_class)` plus the positive
/// class ratio used by gradient boosting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub hypo: f64,
    pub normo: f64,
    pub scale_pos_weight: f64,
}

impl ClassWeights {
    /// Weights that leave the loss unweighted.
    pub fn unit() -> Self {
        ClassWeights {
            hypo: 1.0,
            normo: 1.0,
            scale_pos_weight: 1.0,
        }
    }

    pub fn weight_for(&self, label: GlycemicLabel) -> f64 {
        match label {
            GlycemicLabel::Hypo => self.hypo,
            GlycemicLabel::Normo => self.normo,
        }
    }
}

pub fn class_weights(labels: &[GlycemicLabel]) -> Result<ClassWeights> {
    let n_hypo = labels.iter().filter(|l| l.is_hypo()).count();
    let n_normo = labels.len() - n_hypo;
    if n_hypo == 0 || n_normo == 0 {
        return Err(Error::InsufficientClass(format!(
            "need both classes for weighting, got {n_hypo} hypo and {n_normo} normo"
        )));
    }
    let n = labels.len() as f64;
    Ok(ClassWeights {
        hypo: n / (2.0 * n_hypo as f64),
        normo: n / (2.0 * n_normo as f64),
        scale_pos_weight: n_normo as f64 / n_hypo as f64,
    })
}

/// Serialize windows to the cache CSV layout:
/// `subject_id,start_index,label,glucose_final,gsr_0..gsr_{w-1}`.
pub fn write_windows_csv(windows: &[LabeledWindow]) -> Result<String> {
    let width = match windows.first() {
        Some(w) => w.width(),
        None => return Err(Error::EmptyReport),
    };
    if windows.iter().any(|w| w.width() != width) {
        return Err(Error::Shape("windows of mixed widths".into()));
    }
    let mut out = String::from("subject_id,start_index,label,glucose_final");
    for i in 0..width {
        out.push_str(&format!(",gsr_{i}"));
    }
    out.push('\n');
    for w in windows {
        out.push_str(&format!(
            "{},{},{},{}",
            w.subject_id, w.start_index, w.label, w.glucose_final
        ));
        for v in &w.gsr_seq {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parse the cache CSV layout back into windows.
pub fn read_windows_csv(text: &str) -> Result<Vec<LabeledWindow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("unreadable window csv header: {e}")))?;
    let width = headers.len().saturating_sub(4);
    if width == 0 {
        return Err(Error::Schema("window csv has no gsr columns".into()));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse(format!("unreadable window csv row: {e}")))?;
        if row.len() != width + 4 {
            return Err(Error::Schema(format!(
                "window csv row has {} fields, expected {}",
                row.len(),
                width + 4
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Schema(format!("non-numeric value {s:?} in window csv")))
        };
        let label = match &row[2] {
            "hypo" => GlycemicLabel::Hypo,
            "normo" => GlycemicLabel::Normo,
            other => {
                return Err(Error::Schema(format!("unknown label {other:?} in window csv")))
            }
        };
        let mut gsr_seq = Vec::with_capacity(width);
        for i in 0..width {
            gsr_seq.push(parse_f(&row[4 + i])?);
        }
        out.push(LabeledWindow {
            subject_id: row[0].to_string(),
            start_index: row[1]
                .parse()
                .map_err(|_| Error::Schema(format!("bad start index {:?}", &row[1])))?,
            label,
            glucose_final: parse_f(&row[3])?,
            gsr_seq,
        });
    }
    Ok(out)
}
