//! Per-modality stream parsers.
//!
//! Each parser consumes one stream independently. A malformed line is
//! counted and skipped; only an I/O failure aborts the stream.

use std::io::BufRead;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{Channel, GazeEvent, PhysioSample, SessionManifest, TranscriptSegment};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("stream unreadable: {0}")]
    StreamUnreadable(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: usize,
    /// 1-based line number and reason of the first rejected line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_error: Option<(usize, String)>,
}

impl IngestReport {
    fn reject(&mut self, line_no: usize, reason: impl Into<String>) {
        self.rejected += 1;
        if self.first_error.is_none() {
            self.first_error = Some((line_no, reason.into()));
        }
    }
}

/// Yields (1-based line number, line) for every nonblank line. Invalid
/// UTF-8 is passed through as `Err` so callers can reject the line.
fn nonblank_lines<R: BufRead>(
    mut reader: R,
    mut f: impl FnMut(usize, Result<&str, String>),
) -> Result<(), IngestError> {
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            return Ok(());
        }
        line_no += 1;
        match std::str::from_utf8(&buf) {
            Ok(s) if s.trim().is_empty() => {}
            Ok(s) => f(line_no, Ok(s.trim())),
            Err(e) => f(line_no, Err(format!("invalid UTF-8: {e}"))),
        }
    }
}

fn parse_json_lines<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<(Vec<T>, IngestReport), IngestError> {
    let mut out = Vec::new();
    let mut report = IngestReport::default();
    nonblank_lines(reader, |no, line| match line.and_then(|l| serde_json::from_str::<T>(l).map_err(|e| e.to_string())) {
        Ok(v) => {
            out.push(v);
            report.accepted += 1;
        }
        Err(reason) => report.reject(no, reason),
    })?;
    Ok((out, report))
}

/// One JSON object per line with the `TranscriptSegment` fields.
pub fn parse_transcript_stream<R: BufRead>(reader: R) -> Result<(Vec<TranscriptSegment>, IngestReport), IngestError> {
    parse_json_lines(reader)
}

/// One JSON object per line; fields depend on `kind`.
pub fn parse_gaze_stream<R: BufRead>(reader: R) -> Result<(Vec<GazeEvent>, IngestReport), IngestError> {
    parse_json_lines(reader)
}

/// `t_ms,channel,value` lines. A first nonblank line whose first field is
/// not numeric is taken as a header; it is skipped and not counted.
pub fn parse_physio_stream<R: BufRead>(reader: R) -> Result<(Vec<PhysioSample>, IngestReport), IngestError> {
    let mut out = Vec::new();
    let mut report = IngestReport::default();
    let mut first = true;
    nonblank_lines(reader, |no, line| {
        let is_first = std::mem::take(&mut first);
        let line = match line {
            Ok(l) => l,
            Err(reason) => return report.reject(no, reason),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if is_first && fields[0].parse::<f64>().is_err() {
            return;
        }
        match parse_physio_fields(&fields) {
            Ok(s) => {
                out.push(s);
                report.accepted += 1;
            }
            Err(reason) => report.reject(no, reason),
        }
    })?;
    Ok((out, report))
}

fn parse_physio_fields(fields: &[&str]) -> Result<PhysioSample, String> {
    let [t, channel, value] = fields else {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    };
    let t_ms: i64 = t.parse().map_err(|_| format!("bad t_ms `{t}`"))?;
    let channel: Channel = channel.parse().map_err(|e: crate::domain::DomainError| e.to_string())?;
    let value: f64 = value.parse().map_err(|_| format!("bad value `{value}`"))?;
    PhysioSample::new(t_ms, channel, value).map_err(|e| e.to_string())
}

/// Drops every segment spoken by an excluded speaker. Idempotent.
pub fn redact_excluded_speakers(segments: Vec<TranscriptSegment>, manifest: &SessionManifest) -> Vec<TranscriptSegment> {
    if manifest.excluded_speakers.is_empty() {
        return segments;
    }
    segments
        .into_iter()
        .filter(|s| !manifest.excluded_speakers.contains(&s.speaker))
        .collect()
}
