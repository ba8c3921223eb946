//! Resampling both channels onto the shared 5-minute grid.

use chrono::{DateTime, Utc};

use crate::error::{Error, Result};
use crate::ingest::SubjectRecord;

use super::{Stage, UniformSeries, GRID_MINUTES};

/// Half the grid period: how far a CGM reading may sit from a grid point
/// and still fill it.
const GLUCOSE_TOLERANCE_SECONDS: i64 = GRID_MINUTES * 60 / 2;

/// Align a subject's channels onto a grid anchored at the first glucose
/// reading. Glucose slots take the nearest reading within tolerance; GSR
/// slots take the mean of readings inside the slot's interval, with missing
/// runs of at most `max_gap` slots bridged by linear interpolation.
pub fn align_to_grid(record: &SubjectRecord, max_gap: usize) -> Result<UniformSeries> {
    let start = record.glucose[0].timestamp;
    let last = record.glucose[record.glucose.len() - 1].timestamp;
    let span_seconds = (last - start).num_seconds();
    let period = GRID_MINUTES * 60;
    let len = 1 + (span_seconds / period) as usize;

    let glucose = fill_nearest(record, start, len, period);
    let mut gsr = fill_bin_means(record, start, len, period);
    interpolate_gaps(&mut gsr, max_gap);

    if gsr.iter().all(|v| v.is_none()) {
        return Err(Error::EmptyChannel(format!(
            "subject {}: no GSR readings inside the glucose grid span",
            record.subject_id
        )));
    }

    Ok(UniformSeries {
        subject_id: record.subject_id.clone(),
        start,
        glucose,
        gsr,
        stage: Stage::Aligned,
    })
}

fn grid_time(start: DateTime<Utc>, period: i64, k: usize) -> i64 {
    start.timestamp() + period * k as i64
}

/// Nearest reading within tolerance; ties go to the earlier reading.
fn fill_nearest(
    record: &SubjectRecord,
    start: DateTime<Utc>,
    len: usize,
    period: i64,
) -> Vec<Option<f64>> {
    let samples = &record.glucose;
    let mut out = vec![None; len];
    let mut i = 0usize;
    for (k, slot) in out.iter_mut().enumerate() {
        let target = grid_time(start, period, k);
        while i + 1 < samples.len() {
            let cur = (samples[i].timestamp.timestamp() - target).abs();
            let next = (samples[i + 1].timestamp.timestamp() - target).abs();
            if next < cur {
                i += 1;
            } else {
                break;
            }
        }
        let dist = (samples[i].timestamp.timestamp() - target).abs();
        if dist <= GLUCOSE_TOLERANCE_SECONDS {
            *slot = Some(samples[i].value);
        }
    }
    out
}

/// Mean of readings with timestamps in `[slot, slot + period)`.
fn fill_bin_means(
    record: &SubjectRecord,
    start: DateTime<Utc>,
    len: usize,
    period: i64,
) -> Vec<Option<f64>> {
    let samples = &record.gsr;
    let mut out = vec![None; len];
    let mut i = 0usize;
    for (k, slot) in out.iter_mut().enumerate() {
        let lo = grid_time(start, period, k);
        let hi = lo + period;
        while i < samples.len() && samples[i].timestamp.timestamp() < lo {
            i += 1;
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut j = i;
        while j < samples.len() && samples[j].timestamp.timestamp() < hi {
            sum += samples[j].value;
            n += 1;
            j += 1;
        }
        if n > 0 {
            *slot = Some(sum / n as f64);
        }
        i = j;
    }
    out
}

/// Bridge interior missing runs of at most `max_gap` slots linearly.
fn interpolate_gaps(values: &mut [Option<f64>], max_gap: usize) {
    let mut k = 0usize;
    while k < values.len() {
        if values[k].is_some() {
            k += 1;
            continue;
        }
        let run_start = k;
        while k < values.len() && values[k].is_none() {
            k += 1;
        }
        let run_len = k - run_start;
        if run_start == 0 || k == values.len() || run_len > max_gap {
            continue;
        }
        let left = values[run_start - 1].unwrap();
        let right = values[k].unwrap();
        for (step, slot) in values[run_start..k].iter_mut().enumerate() {
            let frac = (step + 1) as f64 / (run_len + 1) as f64;
            *slot = Some(left + frac * (right - left));
        }
    }
}
