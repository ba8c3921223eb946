//! Data ingestion: subject records from XML or CSV files, cohort merging,
//! and the synthetic cohort generator used for validation.

mod csv;
mod synth;
mod xml;

pub use csv::{parse_subject_csv, write_subject_csv, CsvIngest, CsvLayout, CsvSchema};
pub use synth::{generate_synthetic_cohort, SynthConfig};
pub use xml::parse_subject_xml;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One timestamped sensor reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedSample {
    pub timestamp: DateTime<Utc>,
    pub value: f64,
}

impl TimedSample {
    pub fn new(timestamp: DateTime<Utc>, value: f64) -> Self {
        TimedSample { timestamp, value }
    }
}

/// Where a subject record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Cohort2018,
    Cohort2020,
    Synthetic,
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceTag::Cohort2018 => write!(f, "2018"),
            SourceTag::Cohort2020 => write!(f, "2020"),
            SourceTag::Synthetic => write!(f, "synthetic"),
        }
    }
}

/// Raw per-subject channels, time-ordered and validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub glucose: Vec<TimedSample>,
    pub gsr: Vec<TimedSample>,
    pub source_tag: SourceTag,
}

impl SubjectRecord {
    /// Build a record from unordered channel samples. Samples are sorted by
    /// timestamp, duplicate timestamps within a channel collapse to their
    /// mean, and both channels are validated (non-empty, finite values,
    /// strictly positive glucose).
    pub fn new(
        subject_id: impl Into<String>,
        glucose: Vec<TimedSample>,
        gsr: Vec<TimedSample>,
        source_tag: SourceTag,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let glucose = normalize_channel(glucose, "glucose", &subject_id)?;
        let gsr = normalize_channel(gsr, "gsr", &subject_id)?;
        for s in &glucose {
            if s.value <= 0.0 {
                return Err(Error::Schema(format!(
                    "subject {subject_id}: non-positive glucose value {} at {}",
                    s.value, s.timestamp
                )));
            }
        }
        Ok(SubjectRecord {
            subject_id,
            glucose,
            gsr,
            source_tag,
        })
    }
}

fn normalize_channel(
    mut samples: Vec<TimedSample>,
    channel: &str,
    subject_id: &str,
) -> Result<Vec<TimedSample>> {
    if samples.is_empty() {
        return Err(Error::EmptyChannel(format!(
            "subject {subject_id} has no {channel} samples"
        )));
    }
    for s in &samples {
        if !s.value.is_finite() {
            return Err(Error::Schema(format!(
                "subject {subject_id}: non-finite {channel} value at {}",
                s.timestamp
            )));
        }
    }
    samples.sort_by_key(|s| s.timestamp);
    let mut out: Vec<TimedSample> = Vec::with_capacity(samples.len());
    let mut i = 0;
    while i < samples.len() {
        let ts = samples[i].timestamp;
        let mut sum = 0.0;
        let mut n = 0usize;
        while i < samples.len() && samples[i].timestamp == ts {
            sum += samples[i].value;
            n += 1;
            i += 1;
        }
        out.push(TimedSample::new(ts, sum / n as f64));
    }
    Ok(out)
}

/// A set of subjects plus the total aligned grid length, filled in once the
/// cohort has been through grid alignment (zero until then).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
    pub total_steps: usize,
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectRecord>) -> Self {
        Cohort {
            subjects,
            total_steps: 0,
        }
    }
}

/// Merge cohorts into one, preserving input order. Subject id collisions
/// across sources are disambiguated by suffixing the source tag; a collision
/// within a single source is an error.
pub fn merge_cohorts(cohorts: Vec<Cohort>) -> Result<Cohort> {
    use std::collections::HashSet;
    let mut seen_pairs: HashSet<(String, SourceTag)> = HashSet::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut subjects: Vec<SubjectRecord> = Vec::new();
    for cohort in cohorts {
        for mut subject in cohort.subjects {
            let pair = (subject.subject_id.clone(), subject.source_tag);
            if !seen_pairs.insert(pair) {
                return Err(Error::Schema(format!(
                    "duplicate subject id {} within source {}",
                    subject.subject_id, subject.source_tag
                )));
            }
            if seen_ids.contains(&subject.subject_id) {
                let renamed = format!("{}-{}", subject.subject_id, subject.source_tag);
                if seen_ids.contains(&renamed) {
                    return Err(Error::Schema(format!(
                        "cannot disambiguate subject id {}",
                        subject.subject_id
                    )));
                }
                subject.subject_id = renamed;
            }
            seen_ids.insert(subject.subject_id.clone());
            subjects.push(subject);
        }
    }
    Ok(Cohort::new(subjects))
}

/// Timestamp format used by the source exports and by our canonical CSV.
pub const TIMESTAMP_FORMAT: &str = "%d-%m-%Y %H:%M:%S";

/// Parse a timestamp, trying the day-first export format, then RFC 3339,
/// then two common ISO 8601 layouts.
pub fn parse_timestamp(text: &str) -> Result<DateTime<Utc>> {
    if let Ok(naive) = NaiveDateTime::parse_from_str(text, TIMESTAMP_FORMAT) {
        return Ok(Utc.from_utc_datetime(&naive));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Ok(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(text, fmt) {
            return Ok(Utc.from_utc_datetime(&naive));
        }
    }
    Err(Error::Schema(format!("unparseable timestamp {text:?}")))
}

pub(crate) fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn timestamp_formats_accepted() {
        let a = ts("07-12-2021 01:17:00");
        let b = ts("2021-12-07T01:17:00");
        let c = ts("2021-12-07 01:17:00");
        let d = ts("2021-12-07T01:17:00Z");
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a, d);
        assert!(parse_timestamp("yesterday-ish").is_err());
    }

    #[test]
    fn timestamp_round_trips_through_canonical_format() {
        let t = ts("07-12-2021 01:17:00");
        assert_eq!(format_timestamp(t), "07-12-2021 01:17:00");
    }

    #[test]
    fn record_sorts_and_collapses_duplicates() {
        let g = vec![
            TimedSample::new(ts("01-01-2022 00:10:00"), 110.0),
            TimedSample::new(ts("01-01-2022 00:00:00"), 100.0),
            TimedSample::new(ts("01-01-2022 00:10:00"), 130.0),
        ];
        let e = vec![TimedSample::new(ts("01-01-2022 00:00:00"), 1.5)];
        let rec = SubjectRecord::new("s1", g, e, SourceTag::Cohort2018).unwrap();
        assert_eq!(rec.glucose.len(), 2);
        assert_eq!(rec.glucose[0].value, 100.0);
        assert_eq!(rec.glucose[1].value, 120.0);
        assert!(rec.glucose.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn record_rejects_bad_channels() {
        let t0 = ts("01-01-2022 00:00:00");
        let ok = vec![TimedSample::new(t0, 100.0)];
        let empty: Vec<TimedSample> = vec![];
        assert!(matches!(
            SubjectRecord::new("s", empty.clone(), ok.clone(), SourceTag::Cohort2018),
            Err(Error::EmptyChannel(_))
        ));
        assert!(matches!(
            SubjectRecord::new("s", ok.clone(), empty, SourceTag::Cohort2018),
            Err(Error::EmptyChannel(_))
        ));
        let neg = vec![TimedSample::new(t0, -3.0)];
        assert!(matches!(
            SubjectRecord::new("s", neg, ok.clone(), SourceTag::Cohort2018),
            Err(Error::Schema(_))
        ));
        let nan = vec![TimedSample::new(t0, f64::NAN)];
        assert!(matches!(
            SubjectRecord::new("s", ok, nan, SourceTag::Cohort2018),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn merge_renames_cross_source_collisions() {
        let t0 = ts("01-01-2022 00:00:00");
        let mk = |id: &str, tag| {
            SubjectRecord::new(
                id,
                vec![TimedSample::new(t0, 100.0)],
                vec![TimedSample::new(t0, 1.0)],
                tag,
            )
            .unwrap()
        };
        let a = Cohort::new(vec![mk("559", SourceTag::Cohort2018)]);
        let b = Cohort::new(vec![mk("559", SourceTag::Cohort2020), mk("540", SourceTag::Cohort2020)]);
        let merged = merge_cohorts(vec![a, b]).unwrap();
        let ids: Vec<&str> = merged.subjects.iter().map(|s| s.subject_id.as_str()).collect();
        assert_eq!(ids, vec!["559", "559-2020", "540"]);
    }

    #[test]
    fn merge_rejects_same_source_collision() {
        let t0 = ts("01-01-2022 00:00:00");
        let mk = || {
            SubjectRecord::new(
                "559",
                vec![TimedSample::new(t0, 100.0)],
                vec![TimedSample::new(t0, 1.0)],
                SourceTag::Cohort2018,
            )
            .unwrap()
        };
        let a = Cohort::new(vec![mk()]);
        let b = Cohort::new(vec![mk()]);
        assert!(merge_cohorts(vec![a, b]).is_err());
    }
}
