//! Window merging and lexical ranking.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::EpisodicRecord;

/// Default merge tolerance between candidate seconds.
pub const DEFAULT_MERGE_GAP: i64 = 2;

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Scores tokenized documents against query terms. Implementations must
/// be deterministic and return one nonnegative score per document.
pub trait Ranker: Send + Sync {
    fn score(&self, documents: &[Vec<String>], terms: &[String]) -> Vec<f64>;
}

/// Okapi BM25 with corpus statistics taken from the documents passed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25 {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25 {
    fn default() -> Self {
        Bm25 { k1: 1.2, b: 0.75 }
    }
}

impl Bm25 {
    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`
    pub fn idf(doc_count: usize, df: usize) -> f64 {
        let (n, df) = (doc_count as f64, df as f64);
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

impl Ranker for Bm25 {
    fn score(&self, documents: &[Vec<String>], terms: &[String]) -> Vec<f64> {
        let n = documents.len();
        let total_len: usize = documents.iter().map(Vec::len).sum();
        if n == 0 || total_len == 0 || terms.is_empty() {
            return vec![0.0; n];
        }
        let avgdl = total_len as f64 / n as f64;
        let term_set: BTreeSet<&str> = terms.iter().map(String::as_str).collect();

        let tfs: Vec<HashMap<&str, usize>> = documents
            .iter()
            .map(|doc| {
                let mut tf = HashMap::new();
                for t in doc.iter().map(String::as_str).filter(|t| term_set.contains(t)) {
                    *tf.entry(t).or_insert(0) += 1;
                }
                tf
            })
            .collect();
        let idf: HashMap<&str, f64> = term_set
            .iter()
            .map(|&t| (t, Bm25::idf(n, tfs.iter().filter(|tf| tf.contains_key(t)).count())))
            .collect();

        documents
            .iter()
            .zip(&tfs)
            .map(|(doc, tf)| {
                let norm = self.k1 * (1.0 - self.b + self.b * doc.len() as f64 / avgdl);
                terms
                    .iter()
                    .filter_map(|t| tf.get(t.as_str()).map(|&f| (t, f as f64)))
                    .map(|(t, f)| idf[t.as_str()] * (f * (self.k1 + 1.0)) / (f + norm))
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeContext {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_stress: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_focus: Option<f64>,
    pub record_count: usize,
}

/// A merged run of matching seconds in one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub session_id: String,
    pub from_second: i64,
    pub to_second: i64,
    /// UTC ms at the start of `from_second`.
    pub start_utc: i64,
    /// UTC ms at the end of `to_second` (exclusive).
    pub end_utc: i64,
    pub excerpt: String,
    pub score: f64,
    pub context: EpisodeContext,
}

/// Groups consecutive candidates of one session whose seconds differ by at
/// most `gap`. Input must be sorted by (session, second).
pub fn merge_windows(candidates: &[(String, EpisodicRecord)], gap: i64) -> Vec<&[(String, EpisodicRecord)]> {
    candidates
        .chunk_by(|(sa, a), (sb, b)| sa == sb && b.second - a.second <= gap)
        .collect()
}

/// Distinct transcript texts of a window in time order, space-joined.
fn excerpt(window: &[(String, EpisodicRecord)]) -> String {
    let mut seen = BTreeSet::new();
    let mut parts: Vec<&str> = Vec::new();
    for (_, r) in window {
        for t in &r.transcript {
            if seen.insert(t.seg) {
                parts.push(&t.text);
            }
        }
    }
    parts.join(" ")
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Result order: score descending, then earlier `from_second`, then
/// session id. Without content terms every score is 0 and the latest
/// window comes first.
pub fn episode_order(a: &Episode, b: &Episode, by_recency: bool) -> Ordering {
    let primary = if by_recency {
        b.from_second.cmp(&a.from_second)
    } else {
        b.score.total_cmp(&a.score).then(a.from_second.cmp(&b.from_second))
    };
    primary.then_with(|| a.session_id.cmp(&b.session_id))
}

/// Merges candidates into windows, scores each window's excerpt and
/// returns the best `limit`. Windows with no transcript are dropped when
/// there are content terms to match.
pub fn rank_and_merge(
    candidates: &[(String, EpisodicRecord)],
    content_terms: &[String],
    gap: i64,
    limit: usize,
    ranker: &dyn Ranker,
) -> Vec<Episode> {
    let mut episodes: Vec<Episode> = merge_windows(candidates, gap)
        .into_iter()
        .map(|w| {
            let (first, last) = (&w[0].1, &w[w.len() - 1].1);
            Episode {
                session_id: w[0].0.clone(),
                from_second: first.second,
                to_second: last.second,
                start_utc: first.ts_utc,
                end_utc: last.ts_utc + 1000,
                excerpt: excerpt(w),
                score: 0.0,
                context: EpisodeContext {
                    mean_stress: mean(w.iter().filter_map(|(_, r)| r.stress)),
                    mean_focus: mean(w.iter().filter_map(|(_, r)| r.focus())),
                    record_count: w.len(),
                },
            }
        })
        .collect();

    let by_recency = content_terms.is_empty();
    if !by_recency {
        episodes.retain(|e| !e.excerpt.is_empty());
        let docs: Vec<Vec<String>> = episodes.iter().map(|e| tokenize(&e.excerpt)).collect();
        for (e, s) in episodes.iter_mut().zip(ranker.score(&docs, content_terms)) {
            e.score = s;
        }
    }
    episodes.sort_by(|a, b| episode_order(a, b, by_recency));
    episodes.truncate(limit);
    episodes
}
