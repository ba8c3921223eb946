//! CSV subject files.
//!
//! Two layouts are supported through a small schema mapping:
//!
//! * long: `timestamp,channel,value` rows, one reading per row (this is the
//!   canonical layout [`write_subject_csv`] emits);
//! * wide: `timestamp,glucose,gsr` rows, one or both cells per row.
//!
//! Blank value cells are skipped and counted. Non-numeric cells mark the row
//! bad; bad rows are tolerated up to a configurable fraction of data rows
//! (default 10%) and fatal past it.

use crate::error::{Error, Result};

use super::{format_timestamp, parse_timestamp, SourceTag, SubjectRecord, TimedSample};

#[derive(Debug, Clone, PartialEq)]
pub enum CsvLayout {
    /// One reading per row: a timestamp column, a channel-name column and a
    /// value column. `glucose_channel`/`gsr_channel` give the channel names
    /// to keep; rows with any other channel name are ignored.
    Long {
        timestamp: String,
        channel: String,
        value: String,
        glucose_channel: String,
        gsr_channel: String,
    },
    /// One row per timestamp with separate glucose and GSR value columns.
    Wide {
        timestamp: String,
        glucose: String,
        gsr: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub subject_id: String,
    pub layout: CsvLayout,
    /// Rows with non-numeric value cells are tolerated up to this fraction
    /// of data rows; strictly more is a schema error.
    pub max_bad_row_fraction: f64,
}

impl CsvSchema {
    pub fn long(subject_id: impl Into<String>) -> Self {
        CsvSchema {
            subject_id: subject_id.into(),
            layout: CsvLayout::Long {
                timestamp: "timestamp".into(),
                channel: "channel".into(),
                value: "value".into(),
                glucose_channel: "glucose".into(),
                gsr_channel: "gsr".into(),
            },
            max_bad_row_fraction: 0.1,
        }
    }

    pub fn wide(subject_id: impl Into<String>) -> Self {
        CsvSchema {
            subject_id: subject_id.into(),
            layout: CsvLayout::Wide {
                timestamp: "timestamp".into(),
                glucose: "glucose".into(),
                gsr: "gsr".into(),
            },
            max_bad_row_fraction: 0.1,
        }
    }
}

/// A parsed CSV subject plus row-level bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvIngest {
    pub record: SubjectRecord,
    /// Value cells that were blank and skipped.
    pub skipped_count: usize,
    /// Rows dropped because a value cell was non-numeric.
    pub bad_row_count: usize,
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("missing column {name:?} in csv header")))
}

/// Parse one subject's CSV export according to `schema`.
pub fn parse_subject_csv(text: &str, schema: &CsvSchema, source_tag: SourceTag) -> Result<CsvIngest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("unreadable csv header: {e}")))?
        .clone();

    let mut glucose: Vec<TimedSample> = Vec::new();
    let mut gsr: Vec<TimedSample> = Vec::new();
    let mut skipped = 0usize;
    let mut bad_rows = 0usize;
    let mut total_rows = 0usize;

    match &schema.layout {
        CsvLayout::Long {
            timestamp,
            channel,
            value,
            glucose_channel,
            gsr_channel,
        } => {
            let ts_col = column_index(&headers, timestamp)?;
            let ch_col = column_index(&headers, channel)?;
            let val_col = column_index(&headers, value)?;
            for row in reader.records() {
                let row = row.map_err(|e| Error::Parse(format!("unreadable csv row: {e}")))?;
                total_rows += 1;
                let ch = row.get(ch_col).unwrap_or("").trim();
                let target: &mut Vec<TimedSample> = if ch == glucose_channel {
                    &mut glucose
                } else if ch == gsr_channel {
                    &mut gsr
                } else {
                    continue;
                };
                let raw = row.get(val_col).unwrap_or("").trim();
                if raw.is_empty() {
                    skipped += 1;
                    continue;
                }
                let ts_text = row.get(ts_col).unwrap_or("").trim();
                let ts = parse_timestamp(ts_text)?;
                match raw.parse::<f64>() {
                    Ok(v) => target.push(TimedSample::new(ts, v)),
                    Err(_) => bad_rows += 1,
                }
            }
        }
        CsvLayout::Wide {
            timestamp,
            glucose: glucose_col,
            gsr: gsr_col,
        } => {
            let ts_col = column_index(&headers, timestamp)?;
            let g_col = column_index(&headers, glucose_col)?;
            let e_col = column_index(&headers, gsr_col)?;
            for row in reader.records() {
                let row = row.map_err(|e| Error::Parse(format!("unreadable csv row: {e}")))?;
                total_rows += 1;
                let ts_text = row.get(ts_col).unwrap_or("").trim();
                let ts = parse_timestamp(ts_text)?;
                let mut row_bad = false;
                for (raw, target) in [
                    (row.get(g_col).unwrap_or("").trim(), &mut glucose),
                    (row.get(e_col).unwrap_or("").trim(), &mut gsr),
                ] {
                    if raw.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    match raw.parse::<f64>() {
                        Ok(v) => target.push(TimedSample::new(ts, v)),
                        Err(_) => row_bad = true,
                    }
                }
                if row_bad {
                    bad_rows += 1;
                }
            }
        }
    }

    if total_rows > 0 {
        let bad_fraction = bad_rows as f64 / total_rows as f64;
        if bad_fraction > schema.max_bad_row_fraction {
            return Err(Error::Schema(format!(
                "{bad_rows} of {total_rows} csv rows had non-numeric values \
                 (limit {:.0}%)",
                schema.max_bad_row_fraction * 100.0
            )));
        }
    }

    let record = SubjectRecord::new(schema.subject_id.clone(), glucose, gsr, source_tag)?;
    Ok(CsvIngest {
        record,
        skipped_count: skipped,
        bad_row_count: bad_rows,
    })
}

/// Serialize a record to the canonical long CSV layout. Feeding the output
/// back through [`parse_subject_csv`] with a matching long schema
/// reconstructs the record exactly.
pub fn write_subject_csv(record: &SubjectRecord) -> String {
    let mut out = String::from("timestamp,channel,value\n");
    for (name, samples) in [("glucose", &record.glucose), ("gsr", &record.gsr)] {
        for s in samples {
            out.push_str(&format!("{},{name},{}\n", format_timestamp(s.timestamp), s.value));
        }
    }
    out
}
