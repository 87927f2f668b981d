//! The machine form of a natural-language query.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::RetrievalError;

pub const DEFAULT_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Greater,
    Less,
}

/// A strict comparison against a threshold, written `">1.0"` or `"<-0.5"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predicate {
    pub op: Comparison,
    pub threshold: f64,
}

impl Predicate {
    pub fn gt(threshold: f64) -> Self {
        Predicate { op: Comparison::Greater, threshold }
    }

    pub fn lt(threshold: f64) -> Self {
        Predicate { op: Comparison::Less, threshold }
    }

    /// A missing value never satisfies a predicate.
    pub fn matches(&self, value: Option<f64>) -> bool {
        match (value, self.op) {
            (Some(v), Comparison::Greater) => v > self.threshold,
            (Some(v), Comparison::Less) => v < self.threshold,
            (None, _) => false,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            Comparison::Greater => '>',
            Comparison::Less => '<',
        };
        write!(f, "{op}{:?}", self.threshold)
    }
}

impl FromStr for Predicate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (op, rest) = if let Some(r) = s.strip_prefix('>') {
            (Comparison::Greater, r)
        } else if let Some(r) = s.strip_prefix('<') {
            (Comparison::Less, r)
        } else {
            return Err(format!("predicate `{s}` must start with '>' or '<'"));
        };
        let threshold: f64 = rest.trim().parse().map_err(|_| format!("bad threshold in `{s}`"))?;
        if !threshold.is_finite() {
            return Err(format!("threshold in `{s}` is not finite"));
        }
        Ok(Predicate { op, threshold })
    }
}

impl Serialize for Predicate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which sessions a query searches. Serialized as `"all"` or a list of ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SessionScope {
    #[default]
    All,
    Sessions(BTreeSet<String>),
}

impl Serialize for SessionScope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SessionScope::All => s.serialize_str("all"),
            SessionScope::Sessions(ids) => ids.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for SessionScope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Name(String),
            List(BTreeSet<String>),
        }
        match Wire::deserialize(d)? {
            Wire::Name(s) if s == "all" => Ok(SessionScope::All),
            Wire::Name(s) => Err(serde::de::Error::custom(format!("unknown session scope `{s}`"))),
            Wire::List(ids) => Ok(SessionScope::Sessions(ids)),
        }
    }
}

/// Half-open UTC window `[from_utc, to_utc)` in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub from_utc: i64,
    pub to_utc: i64,
}

impl TimeWindow {
    pub fn contains(&self, ts: i64) -> bool {
        self.from_utc <= ts && ts < self.to_utc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireQuery")]
pub struct StructuredQuery {
    pub session_scope: SessionScope,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_window: Option<TimeWindow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stress_pred: Option<Predicate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub focus_pred: Option<Predicate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hr_pred: Option<Predicate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gsr_pred: Option<Predicate>,
    pub content_terms: Vec<String>,
    pub limit: usize,
}

/// Accepted wire form; `confidence` is allowed (from query providers) and ignored.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireQuery {
    #[serde(default)]
    session_scope: SessionScope,
    #[serde(default)]
    time_window: Option<TimeWindow>,
    #[serde(default)]
    stress_pred: Option<Predicate>,
    #[serde(default)]
    focus_pred: Option<Predicate>,
    #[serde(default)]
    hr_pred: Option<Predicate>,
    #[serde(default)]
    gsr_pred: Option<Predicate>,
    #[serde(default)]
    content_terms: Vec<String>,
    #[serde(default)]
    limit: Option<usize>,
    #[serde(default, rename = "confidence")]
    _confidence: Option<serde_json::Value>,
}

impl TryFrom<WireQuery> for StructuredQuery {
    type Error = RetrievalError;

    fn try_from(w: WireQuery) -> Result<Self, Self::Error> {
        let q = StructuredQuery {
            session_scope: w.session_scope,
            time_window: w.time_window,
            stress_pred: w.stress_pred,
            focus_pred: w.focus_pred,
            hr_pred: w.hr_pred,
            gsr_pred: w.gsr_pred,
            content_terms: w.content_terms,
            limit: w.limit.unwrap_or(DEFAULT_LIMIT),
        };
        q.validate()?;
        Ok(q)
    }
}

impl Default for StructuredQuery {
    fn default() -> Self {
        StructuredQuery {
            session_scope: SessionScope::All,
            time_window: None,
            stress_pred: None,
            focus_pred: None,
            hr_pred: None,
            gsr_pred: None,
            content_terms: Vec::new(),
            limit: DEFAULT_LIMIT,
        }
    }
}

impl StructuredQuery {
    pub fn predicates(&self) -> impl Iterator<Item = &Predicate> {
        [&self.stress_pred, &self.focus_pred, &self.hr_pred, &self.gsr_pred].into_iter().flatten()
    }

    pub fn has_criteria(&self) -> bool {
        self.time_window.is_some() || self.predicates().next().is_some() || !self.content_terms.is_empty()
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        let invalid = |m: String| Err(RetrievalError::InvalidQuery(m));
        if !self.has_criteria() {
            return invalid("query sets no time window, predicate or content term".into());
        }
        if let Some(p) = self.predicates().find(|p| !p.threshold.is_finite()) {
            return invalid(format!("non-finite threshold in {p}"));
        }
        if let Some(p) = self.focus_pred.filter(|p| !(0.0..=1.0).contains(&p.threshold)) {
            return invalid(format!("focus threshold {} outside [0, 1]", p.threshold));
        }
        if let Some(w) = self.time_window.filter(|w| w.from_utc >= w.to_utc) {
            return invalid(format!("empty time window [{}, {})", w.from_utc, w.to_utc));
        }
        if let Some(t) = self
            .content_terms
            .iter()
            .find(|t| t.is_empty() || t.chars().any(|c| c.is_whitespace() || c.is_uppercase()))
        {
            return invalid(format!("content term `{t}` must be a nonempty lowercase word"));
        }
        if self.limit == 0 {
            return invalid("limit must be positive".into());
        }
        Ok(())
    }
}

/// JSON description of the wire form, sent to query providers.
pub fn query_schema() -> serde_json::Value {
    serde_json::json!({
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "session_scope": { "description": "\"all\" or a list of session ids" },
            "time_window": {
                "type": "object",
                "properties": {
                    "from_utc": { "type": "integer", "description": "inclusive, ms since epoch" },
                    "to_utc": { "type": "integer", "description": "exclusive, ms since epoch" }
                },
                "required": ["from_utc", "to_utc"]
            },
            "stress_pred": { "type": "string", "pattern": "^[<>]-?[0-9.]+$", "description": "stress z-score comparison" },
            "focus_pred": { "type": "string", "pattern": "^[<>][0-9.]+$", "description": "fixation fraction comparison in [0,1]" },
            "hr_pred": { "type": "string", "pattern": "^[<>]-?[0-9.]+$", "description": "heart rate z-score comparison" },
            "gsr_pred": { "type": "string", "pattern": "^[<>]-?[0-9.]+$", "description": "skin conductance z-score comparison" },
            "content_terms": { "type": "array", "items": { "type": "string" }, "description": "lowercase words" },
            "limit": { "type": "integer", "minimum": 1 },
            "confidence": { "type": "number" }
        }
    })
}
