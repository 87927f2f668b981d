//! Shared record types for every layer of the pipeline.
//!
//! Raw inputs carry session-relative milliseconds. Episodic records also
//! carry the absolute UTC start of their second so that wall-clock queries
//! never need the manifest.
//!
//! Every type validates its invariants on construction and on
//! deserialization, so a value that exists is a valid value.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound (exclusive) and upper bound (exclusive) for plausible heart rate, in beats/min.
pub const HR_BOUNDS: (f64, f64) = (0.0, 300.0);

pub const MS_PER_SECOND: i64 = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid timezone `{0}`")]
    InvalidTimezone(String),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

impl DomainError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        DomainError::InvalidField { field, reason: reason.into() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            DomainError::MissingField(_) => "MISSING_FIELD",
            DomainError::InvalidTimezone(_) => "INVALID_TIMEZONE",
            DomainError::InvalidField { .. } => "INVALID_FIELD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Physio,
    Gaze,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Speech, Modality::Physio, Modality::Gaze];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Speech => "speech",
            Modality::Physio => "physio",
            Modality::Gaze => "gaze",
        }
    }
}

impl FromStr for Modality {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "speech" | "transcript" => Ok(Modality::Speech),
            "physio" => Ok(Modality::Physio),
            "gaze" => Ok(Modality::Gaze),
            other => Err(DomainError::invalid("modality", format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Checks that a session id is nonempty and usable as a single path component.
pub fn validate_session_id(id: &str) -> Result<(), DomainError> {
    if id.trim().is_empty() {
        return Err(DomainError::MissingField("session_id"));
    }
    let ok = id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if !ok {
        return Err(DomainError::invalid(
            "session_id",
            "only ASCII letters, digits, '-', '_' and '.' are allowed, and it may not start with '.'",
        ));
    }
    Ok(())
}

pub fn parse_timezone(name: &str) -> Result<Tz, DomainError> {
    name.parse::<Tz>().map_err(|_| DomainError::InvalidTimezone(name.to_string()))
}

/// Session identity, consent and capture policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawManifest")]
pub struct SessionManifest {
    pub session_id: String,
    pub started_at: i64,
    pub timezone: String,
    pub capture_enabled: bool,
    pub modalities_enabled: BTreeSet<Modality>,
    pub excluded_speakers: BTreeSet<String>,
    /// `None` keeps records forever.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retention_days: Option<u32>,
}

impl SessionManifest {
    pub fn tz(&self) -> Tz {
        // Validated on construction.
        self.timezone.parse().unwrap_or(Tz::UTC)
    }

    pub fn modality_enabled(&self, modality: Modality) -> bool {
        self.modalities_enabled.contains(&modality)
    }

    pub fn second_to_utc(&self, second: i64) -> i64 {
        self.started_at + MS_PER_SECOND * second
    }
}

/// Manifest as it arrives from a file or request body, before defaults.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawManifest {
    pub session_id: Option<String>,
    pub started_at: Option<i64>,
    pub timezone: Option<String>,
    pub capture_enabled: Option<bool>,
    pub modalities_enabled: Option<BTreeSet<Modality>>,
    pub excluded_speakers: Option<BTreeSet<String>>,
    pub retention_days: Option<u32>,
}

impl TryFrom<RawManifest> for SessionManifest {
    type Error = DomainError;

    fn try_from(raw: RawManifest) -> Result<Self, Self::Error> {
        validate_manifest(raw)
    }
}

/// Checks a raw manifest and fills in defaults: timezone `UTC`, unlimited
/// retention, every modality enabled, no excluded speakers, `started_at` 0.
///
/// `capture_enabled` defaults to `false`: capture is opt-in.
pub fn validate_manifest(raw: RawManifest) -> Result<SessionManifest, DomainError> {
    let session_id = raw.session_id.ok_or(DomainError::MissingField("session_id"))?;
    validate_session_id(&session_id)?;
    let timezone = raw.timezone.unwrap_or_else(|| "UTC".to_string());
    let tz = parse_timezone(&timezone)?;
    let started_at = raw.started_at.unwrap_or(0);
    if started_at < 0 {
        return Err(DomainError::invalid("started_at", "must be nonnegative"));
    }
    let excluded_speakers = raw.excluded_speakers.unwrap_or_default();
    if excluded_speakers.iter().any(|s| s.is_empty()) {
        return Err(DomainError::invalid("excluded_speakers", "empty speaker label"));
    }
    Ok(SessionManifest {
        session_id,
        started_at,
        timezone: tz.name().to_string(),
        capture_enabled: raw.capture_enabled.unwrap_or(false),
        modalities_enabled: raw
            .modalities_enabled
            .unwrap_or_else(|| Modality::ALL.into_iter().collect()),
        excluded_speakers,
        retention_days: raw.retention_days,
    })
}

/// Parses and validates a manifest from JSON text.
pub fn manifest_from_json(text: &str) -> Result<SessionManifest, DomainError> {
    let raw: RawManifest = serde_json::from_str(text)
        .map_err(|e| DomainError::invalid("manifest", e.to_string()))?;
    validate_manifest(raw)
}

fn check_unit(field: &'static str, v: f64) -> Result<(), DomainError> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(DomainError::invalid(field, format!("{v} is outside [0, 1]")))
    }
}

fn check_nonnegative_ms(field: &'static str, v: i64) -> Result<(), DomainError> {
    if v < 0 {
        Err(DomainError::invalid(field, "timestamps are session-relative and nonnegative"))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTranscriptSegment")]
pub struct TranscriptSegment {
    pub start_ms: i64,
    pub end_ms: i64,
    pub speaker: String,
    pub text: String,
    pub confidence: f64,
}

#[derive(Deserialize)]
struct RawTranscriptSegment {
    start_ms: i64,
    end_ms: i64,
    speaker: String,
    text: String,
    confidence: f64,
}

impl TryFrom<RawTranscriptSegment> for TranscriptSegment {
    type Error = DomainError;

    fn try_from(r: RawTranscriptSegment) -> Result<Self, Self::Error> {
        TranscriptSegment::new(r.start_ms, r.end_ms, r.speaker, r.text, r.confidence)
    }
}

impl TranscriptSegment {
    pub fn new(
        start_ms: i64,
        end_ms: i64,
        speaker: impl Into<String>,
        text: impl Into<String>,
        confidence: f64,
    ) -> Result<Self, DomainError> {
        check_nonnegative_ms("start_ms", start_ms)?;
        if start_ms >= end_ms {
            return Err(DomainError::invalid("end_ms", format!("end_ms {end_ms} <= start_ms {start_ms}")));
        }
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::invalid("text", "empty after trimming"));
        }
        check_unit("confidence", confidence)?;
        Ok(TranscriptSegment { start_ms, end_ms, speaker: speaker.into(), text, confidence })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// Heart rate, beats per minute.
    HR,
    /// Galvanic skin response, microsiemens.
    GSR,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::HR, Channel::GSR];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::HR => "HR",
            Channel::GSR => "GSR",
        }
    }

    pub fn check_value(self, value: f64) -> Result<(), DomainError> {
        if !value.is_finite() {
            return Err(DomainError::invalid("value", "not finite"));
        }
        let ok = match self {
            Channel::HR => value > HR_BOUNDS.0 && value < HR_BOUNDS.1,
            Channel::GSR => value >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(DomainError::invalid("value", format!("{value} out of range for {}", self.as_str())))
        }
    }
}

impl FromStr for Channel {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "HR" | "hr" => Ok(Channel::HR),
            "GSR" | "gsr" => Ok(Channel::GSR),
            other => Err(DomainError::invalid("channel", format!("unknown channel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPhysioSample")]
pub struct PhysioSample {
    pub t_ms: i64,
    pub channel: Channel,
    pub value: f64,
}

#[derive(Deserialize)]
struct RawPhysioSample {
    t_ms: i64,
    channel: Channel,
    value: f64,
}

impl TryFrom<RawPhysioSample> for PhysioSample {
    type Error = DomainError;

    fn try_from(r: RawPhysioSample) -> Result<Self, Self::Error> {
        PhysioSample::new(r.t_ms, r.channel, r.value)
    }
}

impl PhysioSample {
    pub fn new(t_ms: i64, channel: Channel, value: f64) -> Result<Self, DomainError> {
        check_nonnegative_ms("t_ms", t_ms)?;
        channel.check_value(value)?;
        Ok(PhysioSample { t_ms, channel, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GazeKind {
    Fixation { x: f64, y: f64 },
    Blink,
    Saccade { amplitude_deg: f64 },
}

impl GazeKind {
    pub fn name(&self) -> &'static str {
        match self {
            GazeKind::Fixation { .. } => "fixation",
            GazeKind::Blink => "blink",
            GazeKind::Saccade { .. } => "saccade",
        }
    }
}

/// A gaze event. On the wire the kind-specific fields are flattened next
/// to `kind`, and a field that does not belong to the kind is an error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGazeEvent", into = "RawGazeEvent")]
pub struct GazeEvent {
    pub kind: GazeKind,
    pub start_ms: i64,
    pub duration_ms: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGazeEvent {
    kind: String,
    start_ms: i64,
    duration_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    amplitude_deg: Option<f64>,
}

impl TryFrom<RawGazeEvent> for GazeEvent {
    type Error = DomainError;

    fn try_from(r: RawGazeEvent) -> Result<Self, Self::Error> {
        let kind = match (r.kind.as_str(), r.x, r.y, r.amplitude_deg) {
            ("fixation", Some(x), Some(y), None) => GazeKind::Fixation { x, y },
            ("blink", None, None, None) => GazeKind::Blink,
            ("saccade", None, None, Some(amplitude_deg)) => GazeKind::Saccade { amplitude_deg },
            ("fixation" | "blink" | "saccade", ..) => {
                return Err(DomainError::invalid("kind", format!("fields do not match kind `{}`", r.kind)))
            }
            (other, ..) => return Err(DomainError::invalid("kind", format!("unknown gaze kind `{other}`"))),
        };
        GazeEvent::new(kind, r.start_ms, r.duration_ms)
    }
}

impl From<GazeEvent> for RawGazeEvent {
    fn from(e: GazeEvent) -> Self {
        let (x, y, amplitude_deg) = match e.kind {
            GazeKind::Fixation { x, y } => (Some(x), Some(y), None),
            GazeKind::Blink => (None, None, None),
            GazeKind::Saccade { amplitude_deg } => (None, None, Some(amplitude_deg)),
        };
        RawGazeEvent {
            kind: e.kind.name().to_string(),
            start_ms: e.start_ms,
            duration_ms: e.duration_ms,
            x,
            y,
            amplitude_deg,
        }
    }
}

impl GazeEvent {
    pub fn new(kind: GazeKind, start_ms: i64, duration_ms: i64) -> Result<Self, DomainError> {
        check_nonnegative_ms("start_ms", start_ms)?;
        if duration_ms <= 0 {
            return Err(DomainError::invalid("duration_ms", "must be positive"));
        }
        match kind {
            GazeKind::Fixation { x, y } => {
                check_unit("x", x)?;
                check_unit("y", y)?;
            }
            GazeKind::Saccade { amplitude_deg } => {
                if !(amplitude_deg.is_finite() && amplitude_deg >= 0.0) {
                    return Err(DomainError::invalid("amplitude_deg", "must be finite and nonnegative"));
                }
            }
            GazeKind::Blink => {}
        }
        Ok(GazeEvent { kind, start_ms, duration_ms })
    }

    pub fn end_ms(&self) -> i64 {
        self.start_ms + self.duration_ms
    }

    pub fn is_fixation(&self) -> bool {
        matches!(self.kind, GazeKind::Fixation { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: u32,
    /// Session z-score of `mean`. Unset until the session baseline is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_mean: Option<f64>,
}

impl ChannelSummary {
    pub fn validate(&self) -> Result<(), DomainError> {
        let finite = [self.mean, self.min, self.max].iter().all(|v| v.is_finite())
            && self.z_mean.is_none_or(f64::is_finite);
        if !finite {
            return Err(DomainError::invalid("physio", "non-finite summary value"));
        }
        if !(self.min <= self.mean && self.mean <= self.max) {
            return Err(DomainError::invalid("physio", "expected min <= mean <= max"));
        }
        if self.count == 0 {
            return Err(DomainError::invalid("physio", "count must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhysioSummary {
    #[serde(rename = "HR", default, skip_serializing_if = "Option::is_none")]
    pub hr: Option<ChannelSummary>,
    #[serde(rename = "GSR", default, skip_serializing_if = "Option::is_none")]
    pub gsr: Option<ChannelSummary>,
}

impl PhysioSummary {
    pub fn channel(&self, channel: Channel) -> Option<&ChannelSummary> {
        match channel {
            Channel::HR => self.hr.as_ref(),
            Channel::GSR => self.gsr.as_ref(),
        }
    }

    pub fn channel_mut(&mut self, channel: Channel) -> &mut Option<ChannelSummary> {
        match channel {
            Channel::HR => &mut self.hr,
            Channel::GSR => &mut self.gsr,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_none() && self.gsr.is_none()
    }

    /// Available channels in fixed order (HR, GSR).
    pub fn channels(&self) -> impl Iterator<Item = (Channel, &ChannelSummary)> {
        Channel::ALL.into_iter().filter_map(|c| self.channel(c).map(|s| (c, s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSummary {
    pub fixation_count: u32,
    pub blink_count: u32,
    pub saccade_count: u32,
    pub fixation_ms: u32,
    pub focus: f64,
}

impl GazeSummary {
    pub fn new(fixation_count: u32, blink_count: u32, saccade_count: u32, fixation_ms: u32) -> Result<Self, DomainError> {
        if fixation_ms > 1000 {
            return Err(DomainError::invalid("fixation_ms", "exceeds one second"));
        }
        Ok(GazeSummary {
            fixation_count,
            blink_count,
            saccade_count,
            fixation_ms,
            focus: f64::from(fixation_ms) / 1000.0,
        })
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.fixation_ms > 1000 {
            return Err(DomainError::invalid("fixation_ms", "exceeds one second"));
        }
        if self.focus != f64::from(self.fixation_ms) / 1000.0 {
            return Err(DomainError::invalid("focus", "must equal fixation_ms / 1000"));
        }
        Ok(())
    }
}

/// One transcript segment's contribution to a second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRef {
    /// Position of the segment in the session's (redacted) transcript stream.
    pub seg: u32,
    pub speaker: String,
    pub text: String,
}

/// A one-second multimodal snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicRecord {
    pub session_id: String,
    pub second: i64,
    pub ts_utc: i64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transcript: Vec<TranscriptRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physio: Option<PhysioSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze: Option<GazeSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stress: Option<f64>,
}

impl EpisodicRecord {
    pub fn new(
        manifest: &SessionManifest,
        second: i64,
        transcript: Vec<TranscriptRef>,
        physio: Option<PhysioSummary>,
        gaze: Option<GazeSummary>,
        stress: Option<f64>,
    ) -> Result<Self, DomainError> {
        let record = EpisodicRecord {
            session_id: manifest.session_id.clone(),
            second,
            ts_utc: manifest.second_to_utc(second),
            transcript,
            physio,
            gaze,
            stress,
        };
        record.validate()?;
        Ok(record)
    }

    /// Checks the record-local invariants. The `ts_utc` relation to the
    /// manifest is checked by the archive, which owns the manifest.
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.second < 0 {
            return Err(DomainError::invalid("second", "must be nonnegative"));
        }
        if let Some(p) = &self.physio {
            if p.is_empty() {
                return Err(DomainError::invalid("physio", "present but has no channel"));
            }
            for (_, s) in p.channels() {
                s.validate()?;
            }
        }
        if let Some(g) = &self.gaze {
            g.validate()?;
        }
        if self.transcript.is_empty() && self.physio.is_none() && self.gaze.is_none() {
            return Err(DomainError::invalid("record", "no modality data"));
        }
        if self.stress.is_some() != self.physio.is_some() {
            return Err(DomainError::invalid("stress", "present iff physio is present"));
        }
        if self.stress.is_some_and(|s| !s.is_finite()) {
            return Err(DomainError::invalid("stress", "not finite"));
        }
        Ok(())
    }

    pub fn focus(&self) -> Option<f64> {
        self.gaze.as_ref().map(|g| g.focus)
    }

    pub fn z_mean(&self, channel: Channel) -> Option<f64> {
        self.physio.as_ref()?.channel(channel)?.z_mean
    }
}
