//! Random but valid inputs.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;

use recall_core::domain::{
    validate_manifest, Channel, ChannelSummary, EpisodicRecord, GazeEvent, GazeKind, GazeSummary, PhysioSample,
    PhysioSummary, RawManifest, SessionManifest, TranscriptRef, TranscriptSegment,
};
use recall_core::retrieval::{Predicate, SessionScope, StructuredQuery, TimeWindow};

use crate::TestRng;

pub const VOCABULARY: &[&str] = &[
    "budget", "review", "roadmap", "deadline", "client", "launch", "hiring", "design", "bug", "release", "metrics",
    "customer", "contract", "quarter", "forecast", "sprint", "demo", "feedback", "invoice", "migration", "outage",
    "latency", "vendor", "pricing", "onboarding", "security", "audit", "strategy", "planning", "retro",
];

pub const SPEAKERS: &[&str] = &["A", "B", "C", "D"];

/// Unix ms for 2025-01-15T09:00:00Z.
pub const BASE_EPOCH_MS: i64 = 1_736_931_600_000;

pub fn manifest(id: &str, started_at: i64) -> SessionManifest {
    validate_manifest(RawManifest {
        session_id: Some(id.to_string()),
        started_at: Some(started_at),
        capture_enabled: Some(true),
        ..Default::default()
    })
    .expect("valid manifest")
}

pub fn sentence(rng: &mut TestRng, words: usize) -> String {
    (0..words).map(|_| *VOCABULARY.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Raw streams of one synthetic session.
#[derive(Debug, Clone)]
pub struct SessionStreams {
    pub manifest: SessionManifest,
    pub segments: Vec<TranscriptSegment>,
    pub physio: Vec<PhysioSample>,
    pub gaze: Vec<GazeEvent>,
    pub duration_ms: i64,
}

/// A session of at most `max_seconds` with every modality present; the
/// two physio channels use independent sampling rates in 1–32 Hz.
pub fn session(rng: &mut TestRng, id: &str, max_seconds: i64) -> SessionStreams {
    let duration_ms = rng.random_range(1..=max_seconds) * 1000;
    let offset = rng.random_range(0..3_000);

    let mut segments = Vec::new();
    let mut t = rng.random_range(0..2_000);
    while t < duration_ms {
        let len = rng.random_range(300..5_000);
        let words = rng.random_range(2..9);
        let text = sentence(rng, words);
        let speaker = *SPEAKERS.choose(rng).unwrap();
        let conf = rng.random_range(0.5..=1.0);
        segments.push(TranscriptSegment::new(t, t + len, speaker, text, conf).unwrap());
        t += len + rng.random_range(0..3_000);
    }

    let mut physio = Vec::new();
    for channel in Channel::ALL {
        let hz: i64 = rng.random_range(1..=32);
        let mut level: f64 = match channel {
            Channel::HR => rng.random_range(60.0..90.0),
            Channel::GSR => rng.random_range(0.5..5.0),
        };
        let mut k = 0;
        loop {
            let t_ms = offset + k * 1000 / hz;
            if t_ms >= duration_ms + offset {
                break;
            }
            level = match channel {
                Channel::HR => (level + rng.random_range(-2.0..2.0)).clamp(40.0, 180.0),
                Channel::GSR => (level + rng.random_range(-0.1..0.1)).clamp(0.0, 20.0),
            };
            physio.push(PhysioSample::new(t_ms, channel, level).unwrap());
            k += 1;
        }
    }
    // Interleave channels by time the way a device export would.
    physio.sort_by_key(|s| s.t_ms);

    let mut gaze = Vec::new();
    let mut t = rng.random_range(0..500);
    while t < duration_ms {
        let kind = match rng.random_range(0..10) {
            0..=5 => GazeKind::Fixation { x: rng.random_range(0.0..=1.0), y: rng.random_range(0.0..=1.0) },
            6..=7 => GazeKind::Saccade { amplitude_deg: rng.random_range(0.5..20.0) },
            _ => GazeKind::Blink,
        };
        let dur = match kind {
            GazeKind::Fixation { .. } => rng.random_range(80..1_500),
            GazeKind::Saccade { .. } => rng.random_range(20..90),
            GazeKind::Blink => rng.random_range(50..400),
        };
        gaze.push(GazeEvent::new(kind, t, dur).unwrap());
        // Occasional overlap with the previous event.
        t += (dur + rng.random_range(-40..400)).max(1);
    }

    SessionStreams { manifest: manifest(id, BASE_EPOCH_MS), segments, physio, gaze, duration_ms }
}

impl SessionStreams {
    /// The transcript as an ingestible JSON-lines body.
    pub fn transcript_jsonl(&self) -> String {
        self.segments.iter().map(|s| serde_json::to_string(s).unwrap() + "\n").collect()
    }

    /// The physio samples as a CSV body with a header line.
    pub fn physio_csv(&self) -> String {
        let mut out = String::from("t_ms,channel,value\n");
        for s in &self.physio {
            out.push_str(&format!("{},{},{}\n", s.t_ms, s.channel.as_str(), s.value));
        }
        out
    }

    pub fn gaze_jsonl(&self) -> String {
        self.gaze.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect()
    }
}

fn channel_summary(rng: &mut TestRng, lo: f64, hi: f64) -> ChannelSummary {
    let a = rng.random_range(lo..hi);
    let b = rng.random_range(lo..hi);
    let (min, max) = if a <= b { (a, b) } else { (b, a) };
    ChannelSummary {
        mean: rng.random_range(min..=max),
        min,
        max,
        count: rng.random_range(1..40),
        z_mean: Some(rng.random_range(-3.0..3.0)),
    }
}

/// `n` random valid records with strictly increasing seconds.
pub fn records(rng: &mut TestRng, manifest: &SessionManifest, n: usize, first_second: i64) -> Vec<EpisodicRecord> {
    let mut out = Vec::with_capacity(n);
    let mut second = first_second;
    let mut seg = 0u32;
    while out.len() < n {
        let transcript = if rng.random_bool(0.7) {
            let k = rng.random_range(1..3);
            (0..k)
                .map(|_| {
                    if rng.random_bool(0.6) {
                        seg += 1;
                    }
                    let words = rng.random_range(1..6);
                    TranscriptRef {
                        seg,
                        speaker: SPEAKERS.choose(rng).unwrap().to_string(),
                        text: sentence(rng, words),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let physio = rng.random_bool(0.7).then(|| PhysioSummary {
            hr: rng.random_bool(0.8).then(|| channel_summary(rng, 50.0, 140.0)),
            gsr: rng.random_bool(0.8).then(|| channel_summary(rng, 0.1, 10.0)),
        });
        let physio = physio.filter(|p| !p.is_empty());
        let gaze = rng.random_bool(0.6).then(|| {
            GazeSummary::new(rng.random_range(0..4), rng.random_range(0..3), rng.random_range(0..3), rng.random_range(0..=1000))
                .unwrap()
        });
        let stress = physio.as_ref().map(|p| {
            let zs: Vec<f64> = p.channels().filter_map(|(_, s)| s.z_mean).collect();
            zs.iter().sum::<f64>() / zs.len() as f64
        });
        if let Ok(r) = EpisodicRecord::new(manifest, second, transcript, physio, gaze, stress) {
            out.push(r);
        }
        second += rng.random_range(1..4);
    }
    out
}

fn predicate(rng: &mut TestRng, lo: f64, hi: f64) -> Predicate {
    let t = (rng.random_range(lo..hi) * 100.0).round() / 100.0;
    if rng.random_bool(0.5) {
        Predicate::gt(t)
    } else {
        Predicate::lt(t)
    }
}

/// A random valid structured query over `sessions`, whose records lie in
/// `[span.0, span.1)` UTC ms.
pub fn structured_query(rng: &mut TestRng, sessions: &[String], span: (i64, i64)) -> StructuredQuery {
    loop {
        let mut q = StructuredQuery { limit: rng.random_range(1..15), ..Default::default() };
        if rng.random_bool(0.3) && !sessions.is_empty() {
            let k = rng.random_range(1..=sessions.len());
            let ids: BTreeSet<String> = sessions.choose_multiple(rng, k).cloned().collect();
            q.session_scope = SessionScope::Sessions(ids);
        }
        if rng.random_bool(0.35) {
            let a = rng.random_range(span.0 - 5_000..span.1);
            let b = rng.random_range(a + 1..=span.1 + 5_000);
            q.time_window = Some(TimeWindow { from_utc: a, to_utc: b });
        }
        if rng.random_bool(0.4) {
            q.stress_pred = Some(predicate(rng, -2.0, 2.0));
        }
        if rng.random_bool(0.25) {
            q.focus_pred = Some(predicate(rng, 0.0, 1.0));
        }
        if rng.random_bool(0.2) {
            q.hr_pred = Some(predicate(rng, -2.0, 2.0));
        }
        if rng.random_bool(0.2) {
            q.gsr_pred = Some(predicate(rng, -2.0, 2.0));
        }
        if rng.random_bool(0.6) {
            let k = rng.random_range(1..4);
            let mut terms: Vec<String> = (0..k).map(|_| VOCABULARY.choose(rng).unwrap().to_string()).collect();
            if rng.random_bool(0.2) {
                terms.push("zzznomatch".into());
            }
            terms.dedup();
            q.content_terms = terms;
        }
        if q.validate().is_ok() {
            return q;
        }
    }
}

/// Random query text built from grammar vocabulary and content words.
pub fn query_text(rng: &mut TestRng) -> String {
    const STATES: &[&str] = &["elevated stress", "calm", "focused", "high heart rate", "high gsr", "stressed", "low stress"];
    const FILLERS: &[&str] = &["what", "was", "discussed", "during", "moments", "of", "the", "when", "I", "was"];
    let mut parts: Vec<String> = Vec::new();
    for _ in 0..rng.random_range(1..6) {
        parts.push(match rng.random_range(0..3) {
            0 => STATES.choose(rng).unwrap().to_string(),
            1 => FILLERS.choose(rng).unwrap().to_string(),
            _ => VOCABULARY.choose(rng).unwrap().to_string(),
        });
    }
    parts.join(" ")
}
