//! Alignment of the three modality streams onto the one-second grid.
//!
//! Second `s` is the half-open window `[1000·s, 1000·s + 1000)` ms. Events
//! are bucketed by start time; fixation time alone is clipped and spread
//! across every window it overlaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Channel, ChannelSummary, DomainError, EpisodicRecord, GazeEvent, GazeKind, GazeSummary, Modality,
    PhysioSample, PhysioSummary, SessionManifest, TranscriptRef, TranscriptSegment, MS_PER_SECOND,
};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("all input streams are empty")]
    AllStreamsEmpty,
    #[error("no physiological data")]
    NoPhysioData,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl AlignError {
    pub fn code(&self) -> &'static str {
        match self {
            AlignError::AllStreamsEmpty => "ALL_STREAMS_EMPTY",
            AlignError::NoPhysioData => "NO_PHYSIO_DATA",
            AlignError::Domain(e) => e.code(),
        }
    }
}

fn second_of(ms: i64) -> i64 {
    ms.div_euclid(MS_PER_SECOND)
}

fn window(second: i64) -> (i64, i64) {
    (second * MS_PER_SECOND, (second + 1) * MS_PER_SECOND)
}

fn overlap(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0)
}

/// Inclusive range of grid seconds covered by any stream.
pub fn build_grid(
    segments: &[TranscriptSegment],
    physio: &[PhysioSample],
    gaze: &[GazeEvent],
) -> Result<(i64, i64), AlignError> {
    let spans = segments
        .iter()
        .map(|s| (s.start_ms, s.end_ms - 1))
        .chain(physio.iter().map(|p| (p.t_ms, p.t_ms)))
        .chain(gaze.iter().map(|g| (g.start_ms, g.end_ms() - 1)));
    let (lo, hi) = spans.fold((i64::MAX, i64::MIN), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
    if lo > hi {
        return Err(AlignError::AllStreamsEmpty);
    }
    Ok((second_of(lo), second_of(hi)))
}

fn transcript_ref(index: usize, s: &TranscriptSegment) -> TranscriptRef {
    TranscriptRef { seg: index as u32, speaker: s.speaker.clone(), text: s.text.clone() }
}

fn transcript_order(segments: &[TranscriptSegment], refs: &mut [TranscriptRef]) {
    refs.sort_by(|a, b| {
        let (sa, sb) = (&segments[a.seg as usize], &segments[b.seg as usize]);
        (sa.start_ms, &sa.speaker, a.seg).cmp(&(sb.start_ms, &sb.speaker, b.seg))
    });
}

/// Segments overlapping `second`, ordered by start time then speaker.
pub fn assign_transcript(segments: &[TranscriptSegment], second: i64) -> Vec<TranscriptRef> {
    let w = window(second);
    let mut refs: Vec<TranscriptRef> = segments
        .iter()
        .enumerate()
        .filter(|(_, s)| overlap((s.start_ms, s.end_ms), w) > 0)
        .map(|(i, s)| transcript_ref(i, s))
        .collect();
    transcript_order(segments, &mut refs);
    refs
}

fn summarize_channel(values: &[f64]) -> Option<ChannelSummary> {
    if values.is_empty() {
        return None;
    }
    let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    let mean = (sum / values.len() as f64).clamp(min, max);
    Some(ChannelSummary { mean, min, max, count: values.len() as u32, z_mean: None })
}

fn summary_from_channels(channels: [&[f64]; 2]) -> Option<PhysioSummary> {
    let summary = PhysioSummary { hr: summarize_channel(channels[0]), gsr: summarize_channel(channels[1]) };
    (!summary.is_empty()).then_some(summary)
}

/// Per-channel mean/min/max/count of the samples inside `second`.
pub fn resample_physio(samples: &[PhysioSample], second: i64) -> Option<PhysioSummary> {
    let mut channels: [Vec<f64>; 2] = Default::default();
    for s in samples.iter().filter(|s| second_of(s.t_ms) == second) {
        channels[s.channel as usize].push(s.value);
    }
    summary_from_channels([&channels[0], &channels[1]])
}

#[derive(Debug, Default, Clone)]
struct GazeAcc {
    fixations: u32,
    blinks: u32,
    saccades: u32,
    fixation_ms: i64,
    touched: bool,
}

impl GazeAcc {
    fn count(&mut self, e: &GazeEvent) {
        match e.kind {
            GazeKind::Fixation { .. } => self.fixations += 1,
            GazeKind::Blink => self.blinks += 1,
            GazeKind::Saccade { .. } => self.saccades += 1,
        }
    }

    fn finish(&self) -> Option<GazeSummary> {
        if !self.touched {
            return None;
        }
        let fixation_ms = self.fixation_ms.clamp(0, MS_PER_SECOND) as u32;
        GazeSummary::new(self.fixations, self.blinks, self.saccades, fixation_ms).ok()
    }
}

/// Gaze summary for `second`; absent when no event overlaps it.
pub fn summarize_gaze(events: &[GazeEvent], second: i64) -> Option<GazeSummary> {
    let w = window(second);
    let mut acc = GazeAcc::default();
    for e in events {
        let ov = overlap((e.start_ms, e.end_ms()), w);
        if second_of(e.start_ms) == second {
            acc.count(e);
            acc.touched = true;
        }
        if ov > 0 {
            acc.touched = true;
            if e.is_fixation() {
                acc.fixation_ms += ov;
            }
        }
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelBaseline {
    pub mean_of_second_means: f64,
    pub pop_std_of_second_means: f64,
}

impl ChannelBaseline {
    pub fn z(&self, value: f64) -> f64 {
        if self.pop_std_of_second_means == 0.0 {
            0.0
        } else {
            (value - self.mean_of_second_means) / self.pop_std_of_second_means
        }
    }
}

/// Whole-session normalization constants per physio channel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionBaseline {
    #[serde(rename = "HR", default, skip_serializing_if = "Option::is_none")]
    pub hr: Option<ChannelBaseline>,
    #[serde(rename = "GSR", default, skip_serializing_if = "Option::is_none")]
    pub gsr: Option<ChannelBaseline>,
}

impl SessionBaseline {
    pub fn channel(&self, channel: Channel) -> Option<&ChannelBaseline> {
        match channel {
            Channel::HR => self.hr.as_ref(),
            Channel::GSR => self.gsr.as_ref(),
        }
    }
}

fn channel_baseline(means: &[f64]) -> Option<ChannelBaseline> {
    if means.is_empty() {
        return None;
    }
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let constant = means.iter().all(|&m| m == means[0]);
    let std = if constant {
        0.0
    } else {
        (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    Some(ChannelBaseline { mean_of_second_means: mean, pop_std_of_second_means: std })
}

/// Mean and population std of the per-second means, per channel.
pub fn compute_baseline<'a>(
    summaries: impl IntoIterator<Item = &'a PhysioSummary>,
) -> Result<SessionBaseline, AlignError> {
    let mut means: [Vec<f64>; 2] = Default::default();
    for s in summaries {
        for (c, cs) in s.channels() {
            means[c as usize].push(cs.mean);
        }
    }
    let baseline = SessionBaseline { hr: channel_baseline(&means[0]), gsr: channel_baseline(&means[1]) };
    if baseline.hr.is_none() && baseline.gsr.is_none() {
        return Err(AlignError::NoPhysioData);
    }
    Ok(baseline)
}

/// Fills `z_mean` for each channel and sets `stress` to the mean z-score
/// of the available channels.
pub fn normalize_and_score(records: &mut [EpisodicRecord], baseline: &SessionBaseline) {
    for rec in records {
        let Some(physio) = rec.physio.as_mut() else {
            rec.stress = None;
            continue;
        };
        let mut zs = Vec::with_capacity(2);
        for c in Channel::ALL {
            if let (Some(summary), Some(base)) = (physio.channel_mut(c).as_mut(), baseline.channel(c)) {
                let z = base.z(summary.mean);
                summary.z_mean = Some(z);
                zs.push(z);
            }
        }
        rec.stress = (!zs.is_empty()).then(|| zs.iter().sum::<f64>() / zs.len() as f64);
    }
}

#[derive(Default)]
struct SecondAcc {
    transcript: Vec<TranscriptRef>,
    physio: [Vec<f64>; 2],
    gaze: GazeAcc,
}

/// Aligns one session's validated, redacted streams into episodic records.
///
/// Streams for modalities the manifest disables are ignored. Seconds with
/// no data emit nothing.
pub fn align_session(
    manifest: &SessionManifest,
    segments: &[TranscriptSegment],
    physio: &[PhysioSample],
    gaze: &[GazeEvent],
) -> Result<Vec<EpisodicRecord>, AlignError> {
    let segments = if manifest.modality_enabled(Modality::Speech) { segments } else { &[] };
    let physio = if manifest.modality_enabled(Modality::Physio) { physio } else { &[] };
    let gaze = if manifest.modality_enabled(Modality::Gaze) { gaze } else { &[] };
    build_grid(segments, physio, gaze)?;

    let mut seconds: BTreeMap<i64, SecondAcc> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        for sec in second_of(s.start_ms)..=second_of(s.end_ms - 1) {
            seconds.entry(sec).or_default().transcript.push(transcript_ref(i, s));
        }
    }
    for p in physio {
        seconds.entry(second_of(p.t_ms)).or_default().physio[p.channel as usize].push(p.value);
    }
    for e in gaze {
        let first = second_of(e.start_ms);
        let acc = &mut seconds.entry(first).or_default().gaze;
        acc.count(e);
        for sec in first..=second_of(e.end_ms() - 1) {
            let acc = &mut seconds.entry(sec).or_default().gaze;
            acc.touched = true;
            if e.is_fixation() {
                acc.fixation_ms += overlap((e.start_ms, e.end_ms()), window(sec));
            }
        }
    }

    let mut records = Vec::with_capacity(seconds.len());
    for (second, mut acc) in seconds {
        transcript_order(segments, &mut acc.transcript);
        let physio = summary_from_channels([&acc.physio[0], &acc.physio[1]]);
        let stress = physio.as_ref().map(|_| 0.0);
        records.push(EpisodicRecord::new(manifest, second, acc.transcript, physio, acc.gaze.finish(), stress)?);
    }

    if let Ok(baseline) = compute_baseline(records.iter().filter_map(|r| r.physio.as_ref())) {
        normalize_and_score(&mut records, &baseline);
    }
    Ok(records)
}
