//! Deterministic rule parser for natural-language queries.
//!
//! The vocabulary (state phrases, day words, weekday names, stopwords)
//! lives in a JSON data file; `data/grammar.json` is compiled in as the
//! default and deployments can load their own.
//!
//! Recognized constructs, resolved in the caller's timezone:
//!
//! * state phrases such as `elevated stress`, `calm`, `focused`
//! * `today`, `yesterday`, `last <weekday>`, ISO dates (`2025-01-14`)
//! * `between <clock> and <clock>` with clocks like `2pm`, `2 pm`,
//!   `14:30`, `2:30pm`, `noon`
//!
//! Every other token is lowercased, split on non-alphanumerics, filtered
//! through the stopword list and kept as a content term.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Datelike, Days, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc, Weekday};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use super::query::{Comparison, Predicate, StructuredQuery, TimeWindow};
use super::rank::tokenize;
use super::RetrievalError;

const DEFAULT_GRAMMAR: &str = include_str!("../../data/grammar.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredicateField {
    Stress,
    Focus,
    Hr,
    Gsr,
}

/// Which configured threshold a state phrase compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRef {
    /// `+θ` (z-units).
    Elevated,
    /// `−θ₂` (z-units).
    Calm,
    /// `φ`, a fixation fraction.
    Focus,
}

/// Thresholds used by state phrases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub elevated: f64,
    pub calm: f64,
    pub focus: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { elevated: 1.0, calm: 0.5, focus: 0.6 }
    }
}

impl Thresholds {
    fn resolve(&self, r: ThresholdRef) -> f64 {
        match r {
            ThresholdRef::Elevated => self.elevated,
            ThresholdRef::Calm => -self.calm,
            ThresholdRef::Focus => self.focus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum WireOp {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatePhrase {
    pub phrase: String,
    pub field: PredicateField,
    op: WireOp,
    pub threshold: ThresholdRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GrammarFile {
    states: Vec<StatePhrase>,
    relative_days: BTreeMap<String, u32>,
    last_words: BTreeSet<String>,
    range_start_words: BTreeSet<String>,
    range_join_words: BTreeSet<String>,
    named_clocks: BTreeMap<String, u32>,
    weekdays: BTreeMap<String, String>,
    stopwords: BTreeSet<String>,
}

/// A loaded query grammar.
#[derive(Debug, Clone)]
pub struct Grammar {
    /// State phrases as token sequences, longest first.
    states: Vec<(Vec<String>, StatePhrase)>,
    relative_days: BTreeMap<String, u32>,
    last_words: BTreeSet<String>,
    range_start_words: BTreeSet<String>,
    range_join_words: BTreeSet<String>,
    named_clocks: BTreeMap<String, u32>,
    weekdays: BTreeMap<String, Weekday>,
    stopwords: BTreeSet<String>,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar::from_json(DEFAULT_GRAMMAR).expect("bundled grammar is valid")
    }
}

impl Grammar {
    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let file: GrammarFile = serde_json::from_str(text).map_err(|e| RetrievalError::Grammar(e.to_string()))?;
        let mut states: Vec<(Vec<String>, StatePhrase)> = file
            .states
            .into_iter()
            .map(|s| (s.phrase.split_whitespace().map(str::to_lowercase).collect(), s))
            .collect();
        if states.iter().any(|(toks, _)| toks.is_empty()) {
            return Err(RetrievalError::Grammar("empty state phrase".into()));
        }
        states.sort_by_key(|s| std::cmp::Reverse(s.0.len()));
        let weekdays = file
            .weekdays
            .into_iter()
            .map(|(word, day)| {
                day.parse::<Weekday>()
                    .map(|d| (word, d))
                    .map_err(|_| RetrievalError::Grammar(format!("unknown weekday `{day}`")))
            })
            .collect::<Result<_, _>>()?;
        if let Some((name, _)) = file.named_clocks.iter().find(|(_, &m)| m >= 24 * 60) {
            return Err(RetrievalError::Grammar(format!("clock `{name}` is past midnight")));
        }
        Ok(Grammar {
            states,
            relative_days: file.relative_days,
            last_words: file.last_words,
            range_start_words: file.range_start_words,
            range_join_words: file.range_join_words,
            named_clocks: file.named_clocks,
            weekdays,
            stopwords: file.stopwords,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RetrievalError::Grammar(format!("{}: {e}", path.display())))?;
        Grammar::from_json(&text)
    }

    pub fn is_stopword(&self, term: &str) -> bool {
        self.stopwords.contains(term)
    }

    pub fn state_phrases(&self) -> impl Iterator<Item = &StatePhrase> {
        self.states.iter().map(|(_, s)| s)
    }

    fn match_state(&self, tokens: &[String]) -> Option<(usize, &StatePhrase)> {
        self.states
            .iter()
            .find(|(phrase, _)| tokens.len() >= phrase.len() && tokens[..phrase.len()] == phrase[..])
            .map(|(phrase, s)| (phrase.len(), s))
    }

    /// Parses a clock at the start of `tokens`; returns tokens consumed
    /// and minutes after midnight.
    fn match_clock(&self, tokens: &[String]) -> Option<(usize, u32)> {
        let first = tokens.first()?;
        if let Some(&m) = self.named_clocks.get(first) {
            return Some((1, m));
        }
        if let Some(suffix) = tokens.get(1).filter(|s| matches!(s.as_str(), "am" | "pm")) {
            if let Some(m) = parse_clock(&format!("{first}{suffix}")) {
                return Some((2, m));
            }
        }
        parse_clock(first).map(|m| (1, m))
    }
}

/// `14`, `14:30`, `2pm`, `2:30pm`, `12am` → minutes after midnight.
fn parse_clock(token: &str) -> Option<u32> {
    let (body, meridiem) = match token.strip_suffix("am") {
        Some(b) => (b, Some(false)),
        None => match token.strip_suffix("pm") {
            Some(b) => (b, Some(true)),
            None => (token, None),
        },
    };
    let (h, m) = match body.split_once(':') {
        Some((h, m)) if m.len() == 2 => (h.parse::<u32>().ok()?, m.parse::<u32>().ok()?),
        Some(_) => return None,
        None => (body.parse::<u32>().ok()?, 0),
    };
    if body.is_empty() || !body.chars().all(|c| c.is_ascii_digit() || c == ':') || m >= 60 {
        return None;
    }
    let h = match meridiem {
        Some(pm) if (1..=12).contains(&h) => h % 12 + if pm { 12 } else { 0 },
        Some(_) => return None,
        None if h < 24 => h,
        None => return None,
    };
    Some(h * 60 + m)
}

fn local_to_utc_ms(tz: Tz, local: NaiveDateTime) -> i64 {
    // A local time inside a DST gap does not exist; step forward until it does.
    let mut t = local;
    for _ in 0..4 {
        if let Some(dt) = tz.from_local_datetime(&t).earliest() {
            return dt.timestamp_millis();
        }
        t += chrono::Duration::minutes(30);
    }
    tz.from_utc_datetime(&local).timestamp_millis()
}

fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Parses `text` with the rule grammar, resolving dates against `now_utc`
/// (ms) in `tz`. Fails only on text with no words.
pub fn parse_query_rules(
    text: &str,
    now_utc: i64,
    tz: Tz,
    grammar: &Grammar,
    thresholds: &Thresholds,
) -> Result<StructuredQuery, RetrievalError> {
    let tokens = split_tokens(text);
    if tokens.is_empty() {
        return Err(RetrievalError::UnparsableQuery);
    }
    let now = DateTime::<Utc>::from_timestamp_millis(now_utc)
        .ok_or_else(|| RetrievalError::InvalidQuery(format!("clock value {now_utc} out of range")))?
        .with_timezone(&tz);
    let today = now.date_naive();

    let mut query = StructuredQuery::default();
    let mut day: Option<NaiveDate> = None;
    let mut clocks: Option<(u32, u32)> = None;
    let mut leftovers: Vec<&str> = Vec::new();

    let mut i = 0;
    while i < tokens.len() {
        let rest = &tokens[i..];
        let tok = rest[0].as_str();
        if let Some((n, state)) = grammar.match_state(rest) {
            let threshold = thresholds.resolve(state.threshold);
            let op = match state.op {
                WireOp::Gt => Comparison::Greater,
                WireOp::Lt => Comparison::Less,
            };
            let slot = match state.field {
                PredicateField::Stress => &mut query.stress_pred,
                PredicateField::Focus => &mut query.focus_pred,
                PredicateField::Hr => &mut query.hr_pred,
                PredicateField::Gsr => &mut query.gsr_pred,
            };
            *slot = Some(Predicate { op, threshold });
            i += n;
        } else if let Some(&back) = grammar.relative_days.get(tok) {
            day = today.checked_sub_days(Days::new(u64::from(back)));
            i += 1;
        } else if let Some(wd) = grammar
            .last_words
            .contains(tok)
            .then(|| rest.get(1).and_then(|w| grammar.weekdays.get(w)))
            .flatten()
        {
            let back = (7 + today.weekday().num_days_from_monday() - wd.num_days_from_monday()) % 7;
            let back = if back == 0 { 7 } else { back };
            day = today.checked_sub_days(Days::new(u64::from(back)));
            i += 2;
        } else if let Ok(date) = NaiveDate::parse_from_str(tok, "%Y-%m-%d") {
            day = Some(date);
            i += 1;
        } else if let Some((n, range)) = grammar
            .range_start_words
            .contains(tok)
            .then(|| match_clock_range(grammar, &rest[1..]))
            .flatten()
        {
            clocks = Some(range);
            i += 1 + n;
        } else {
            leftovers.push(tok);
            i += 1;
        }
    }

    if day.is_some() || clocks.is_some() {
        let date = day.unwrap_or(today);
        let midnight = date.and_time(NaiveTime::MIN);
        let (start, end) = match clocks {
            Some((a, b)) => {
                let start = midnight + chrono::Duration::minutes(i64::from(a));
                let mut end = midnight + chrono::Duration::minutes(i64::from(b));
                if end <= start {
                    end += chrono::Duration::days(1);
                }
                (start, end)
            }
            None => (midnight, midnight + chrono::Duration::days(1)),
        };
        query.time_window = Some(TimeWindow { from_utc: local_to_utc_ms(tz, start), to_utc: local_to_utc_ms(tz, end) });
    }

    let mut seen = BTreeSet::new();
    let mut terms: Vec<String> = leftovers
        .iter()
        .flat_map(|t| tokenize(t))
        .filter(|t| !grammar.is_stopword(t))
        .filter(|t| seen.insert(t.clone()))
        .collect();
    if !query.has_criteria() && terms.is_empty() {
        // Only stopwords: search for them rather than return nothing.
        let mut seen = BTreeSet::new();
        terms = leftovers.iter().flat_map(|t| tokenize(t)).filter(|t| seen.insert(t.clone())).collect();
    }
    query.content_terms = terms;
    if !query.has_criteria() {
        return Err(RetrievalError::UnparsableQuery);
    }
    query.validate()?;
    Ok(query)
}

fn match_clock_range(grammar: &Grammar, tokens: &[String]) -> Option<(usize, (u32, u32))> {
    let (n1, a) = grammar.match_clock(tokens)?;
    let join = tokens.get(n1)?;
    if !grammar.range_join_words.contains(join) {
        return None;
    }
    let (n2, b) = grammar.match_clock(&tokens[n1 + 1..])?;
    Some((n1 + 1 + n2, (a, b)))
}
