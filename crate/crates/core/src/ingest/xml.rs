//! XML subject files: a root element carrying a subject `id` attribute,
//! with one child element per channel and one `<event ts=... value=.../>`
//! per reading.

use crate::error::{Error, Result};

use super::{parse_timestamp, SourceTag, SubjectRecord, TimedSample};

/// Parse one subject's XML export. Channel elements whose names contain
/// `glucose` or `gsr` (for example `glucose_level`, `basis_gsr`) feed the
/// two channels; any other element is parsed and dropped.
pub fn parse_subject_xml(text: &str, source_tag: SourceTag) -> Result<SubjectRecord> {
    let doc = roxmltree::Document::parse(text)
        .map_err(|e| Error::Parse(format!("malformed xml: {e}")))?;
    let root = doc.root_element();
    let subject_id = root
        .attribute("id")
        .ok_or_else(|| Error::Schema("root element has no subject id attribute".into()))?
        .to_string();

    let mut glucose: Vec<TimedSample> = Vec::new();
    let mut gsr: Vec<TimedSample> = Vec::new();
    for channel in root.children().filter(|n| n.is_element()) {
        let name = channel.tag_name().name().to_ascii_lowercase();
        let target: Option<&mut Vec<TimedSample>> = if name.contains("glucose") {
            Some(&mut glucose)
        } else if name.contains("gsr") {
            Some(&mut gsr)
        } else {
            None
        };
        let samples = parse_events(&channel)?;
        if let Some(target) = target {
            target.extend(samples);
        }
    }
    SubjectRecord::new(subject_id, glucose, gsr, source_tag)
}

fn parse_events(channel: &roxmltree::Node) -> Result<Vec<TimedSample>> {
    let channel_name = channel.tag_name().name().to_string();
    let mut out = Vec::new();
    for event in channel.children().filter(|n| n.is_element()) {
        if event.tag_name().name() != "event" {
            continue;
        }
        let ts_text = event.attribute("ts").ok_or_else(|| {
            Error::Schema(format!("event in <{channel_name}> has no ts attribute"))
        })?;
        let value_text = event.attribute("value").ok_or_else(|| {
            Error::Schema(format!("event in <{channel_name}> has no value attribute"))
        })?;
        let timestamp = parse_timestamp(ts_text).map_err(|_| {
            Error::Schema(format!(
                "unparseable timestamp {ts_text:?} in <{channel_name}>"
            ))
        })?;
        let value: f64 = value_text.parse().map_err(|_| {
            Error::Schema(format!("non-numeric value {value_text:?} in <{channel_name}>"))
        })?;
        out.push(TimedSample::new(timestamp, value));
    }
    Ok(out)
}
