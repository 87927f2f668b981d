//! Brute-force recomputations.

use std::collections::HashSet;

use recall_core::domain::{Channel, EpisodicRecord, GazeEvent, PhysioSample};
use recall_core::retrieval::{Predicate, SessionScope, StructuredQuery};

/// Population mean and standard deviation by Welford's update.
pub fn population_mean_std(values: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    (mean, (m2 / values.len() as f64).sqrt())
}

pub fn relative_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Gaze events whose start second lies in `[first, last]`.
pub fn gaze_events_in_grid(events: &[GazeEvent], first: i64, last: i64) -> usize {
    events.iter().filter(|e| (first * 1000..(last + 1) * 1000).contains(&e.start_ms)).count()
}

/// Mean of all raw samples of `channel`.
pub fn raw_channel_mean(samples: &[PhysioSample], channel: Channel) -> Option<f64> {
    let v: Vec<f64> = samples.iter().filter(|s| s.channel == channel).map(|s| s.value).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Count-weighted mean of the per-second means in `records`.
pub fn weighted_second_mean(records: &[EpisodicRecord], channel: Channel) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0u64);
    for r in records {
        if let Some(s) = r.physio.as_ref().and_then(|p| p.channel(channel)) {
            sum += s.mean * f64::from(s.count);
            n += u64::from(s.count);
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEpisode {
    pub session_id: String,
    pub from_second: i64,
    pub to_second: i64,
    pub excerpt: String,
    pub score: f64,
}

fn holds(p: &Option<Predicate>, value: Option<f64>) -> bool {
    use recall_core::retrieval::query::Comparison;
    match (p, value) {
        (None, _) => true,
        (Some(_), None) => false,
        (Some(p), Some(v)) => match p.op {
            Comparison::Greater => v > p.threshold,
            Comparison::Less => v < p.threshold,
        },
    }
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Linear scan over every stored record: scope, window and predicate
/// conjunction, gap merge, direct BM25 evaluation, sort, limit.
pub fn scan_query(
    archive: &[(String, Vec<EpisodicRecord>)],
    q: &StructuredQuery,
    gap: i64,
) -> (Vec<OracleEpisode>, usize) {
    let (k1, b) = (1.2, 0.75);
    let in_scope = |id: &str| match &q.session_scope {
        SessionScope::All => true,
        SessionScope::Sessions(ids) => ids.contains(id),
    };

    let mut windows: Vec<(String, Vec<&EpisodicRecord>)> = Vec::new();
    let mut candidates = 0;
    let mut sessions: Vec<&(String, Vec<EpisodicRecord>)> = archive.iter().collect();
    sessions.sort_by(|a, b| a.0.cmp(&b.0));
    for (id, records) in sessions {
        if !in_scope(id) {
            continue;
        }
        let mut current: Vec<&EpisodicRecord> = Vec::new();
        for r in records {
            let in_window = q.time_window.is_none_or(|w| r.ts_utc >= w.from_utc && r.ts_utc < w.to_utc);
            let pass = in_window
                && holds(&q.stress_pred, r.stress)
                && holds(&q.focus_pred, r.gaze.as_ref().map(|g| g.focus))
                && holds(&q.hr_pred, r.physio.as_ref().and_then(|p| p.hr.as_ref()).and_then(|s| s.z_mean))
                && holds(&q.gsr_pred, r.physio.as_ref().and_then(|p| p.gsr.as_ref()).and_then(|s| s.z_mean));
            if !pass {
                continue;
            }
            candidates += 1;
            if let Some(last) = current.last() {
                if r.second - last.second > gap {
                    windows.push((id.clone(), std::mem::take(&mut current)));
                }
            }
            current.push(r);
        }
        if !current.is_empty() {
            windows.push((id.clone(), current));
        }
    }

    let mut episodes: Vec<OracleEpisode> = windows
        .into_iter()
        .map(|(id, recs)| {
            let mut seen = HashSet::new();
            let mut texts = Vec::new();
            for r in &recs {
                for t in &r.transcript {
                    if seen.insert(t.seg) {
                        texts.push(t.text.clone());
                    }
                }
            }
            OracleEpisode {
                session_id: id,
                from_second: recs[0].second,
                to_second: recs[recs.len() - 1].second,
                excerpt: texts.join(" "),
                score: 0.0,
            }
        })
        .collect();

    let terms = &q.content_terms;
    if terms.is_empty() {
        episodes.sort_by(|a, b| b.from_second.cmp(&a.from_second).then(a.session_id.cmp(&b.session_id)));
    } else {
        episodes.retain(|e| !e.excerpt.is_empty());
        let docs: Vec<Vec<String>> = episodes.iter().map(|e| words(&e.excerpt)).collect();
        let n = docs.len() as f64;
        let avgdl = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
        for (e, doc) in episodes.iter_mut().zip(&docs) {
            let mut score = 0.0;
            for term in terms {
                let tf = doc.iter().filter(|w| *w == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                score += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avgdl));
            }
            e.score = score;
        }
        episodes.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.from_second.cmp(&b.from_second))
                .then(a.session_id.cmp(&b.session_id))
        });
    }
    episodes.truncate(q.limit);
    (episodes, candidates)
}
