//! Hybrid retrieval: parse a question, filter archived seconds on
//! time and physiological/attentional metadata, then rank the surviving
//! transcript windows lexically.
//!
//! The ranker only ever sees records that passed every filter.

pub mod grammar;
pub mod provider;
pub mod query;
pub mod rank;

use std::collections::BTreeSet;

use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{Archive, ArchiveError};
use crate::domain::{Channel, EpisodicRecord, MS_PER_SECOND};

pub use grammar::{parse_query_rules, Grammar, Thresholds};
pub use provider::{parse_query_llm, ParseDiagnostics, ProviderError, ProviderRequest, QueryProvider};
pub use query::{Predicate, SessionScope, StructuredQuery, TimeWindow};
pub use rank::{rank_and_merge, Bm25, Episode, EpisodeContext, Ranker};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query text is empty")]
    UnparsableQuery,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("grammar: {0}")]
    Grammar(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

impl RetrievalError {
    pub fn code(&self) -> &'static str {
        match self {
            RetrievalError::UnparsableQuery => "UNPARSABLE_QUERY",
            RetrievalError::InvalidQuery(_) => "INVALID_QUERY",
            RetrievalError::Grammar(_) => "INVALID_GRAMMAR",
            RetrievalError::Archive(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub episodes: Vec<Episode>,
    /// Seconds that passed every filter, before merging and the limit.
    pub total_candidates: usize,
    pub parsed: StructuredQuery,
}

/// Every set predicate holds and the record is inside the time window.
pub fn record_matches(query: &StructuredQuery, record: &EpisodicRecord) -> bool {
    query.time_window.is_none_or(|w| w.contains(record.ts_utc))
        && query.stress_pred.is_none_or(|p| p.matches(record.stress))
        && query.focus_pred.is_none_or(|p| p.matches(record.focus()))
        && query.hr_pred.is_none_or(|p| p.matches(record.z_mean(Channel::HR)))
        && query.gsr_pred.is_none_or(|p| p.matches(record.z_mean(Channel::GSR)))
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

/// Records in scope that satisfy every filter of `query`, ordered by
/// session id then second. Sessions named in the scope but absent from
/// the archive contribute nothing.
pub fn filter_records(archive: &Archive, query: &StructuredQuery) -> Result<Vec<(String, EpisodicRecord)>, RetrievalError> {
    let sessions: Vec<String> = match &query.session_scope {
        SessionScope::All => archive.list_sessions()?,
        SessionScope::Sessions(ids) => ids.iter().cloned().collect(),
    };
    let mut out = Vec::new();
    for id in sessions {
        let records = match query.time_window {
            Some(w) => {
                let started = match archive.manifest(&id) {
                    Ok(m) => m.started_at,
                    Err(ArchiveError::UnknownSession(_)) => continue,
                    Err(e) => return Err(e.into()),
                };
                let from = ceil_div(w.from_utc - started, MS_PER_SECOND).max(0);
                let to = ceil_div(w.to_utc - started, MS_PER_SECOND) - 1;
                if to < from {
                    continue;
                }
                archive.read_range(&id, from, to)
            }
            None => archive.read_all(&id),
        };
        let records = match records {
            Ok(r) => r,
            Err(ArchiveError::UnknownSession(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        out.extend(records.into_iter().filter(|r| record_matches(query, r)).map(|r| (id.clone(), r)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub thresholds: Thresholds,
    pub merge_gap: i64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig { thresholds: Thresholds::default(), merge_gap: rank::DEFAULT_MERGE_GAP }
    }
}

/// Per-request settings that override what the parser produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryOptions {
    pub sessions: Option<BTreeSet<String>>,
    pub limit: Option<usize>,
}

/// Parser, ranker and optional provider bundled for repeated queries.
pub struct QueryEngine {
    grammar: Grammar,
    config: QueryConfig,
    ranker: Box<dyn Ranker>,
    provider: Option<Box<dyn QueryProvider>>,
}

impl Default for QueryEngine {
    fn default() -> Self {
        QueryEngine::new(QueryConfig::default())
    }
}

impl QueryEngine {
    pub fn new(config: QueryConfig) -> Self {
        QueryEngine { grammar: Grammar::default(), config, ranker: Box::new(Bm25::default()), provider: None }
    }

    pub fn with_grammar(mut self, grammar: Grammar) -> Self {
        self.grammar = grammar;
        self
    }

    pub fn with_ranker(mut self, ranker: Box<dyn Ranker>) -> Self {
        self.ranker = ranker;
        self
    }

    pub fn with_provider(mut self, provider: Box<dyn QueryProvider>) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn config(&self) -> &QueryConfig {
        &self.config
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    /// Parses with the provider when one is configured, else with rules.
    pub fn parse(&self, text: &str, now_utc: i64, tz: Tz) -> Result<(StructuredQuery, ParseDiagnostics), RetrievalError> {
        let th = &self.config.thresholds;
        match &self.provider {
            Some(p) => parse_query_llm(text, now_utc, tz, p.as_ref(), &self.grammar, th),
            None => Ok((parse_query_rules(text, now_utc, tz, &self.grammar, th)?, ParseDiagnostics::rules())),
        }
    }

    /// Filters and ranks for an already structured query.
    pub fn execute_structured(&self, archive: &Archive, query: &StructuredQuery) -> Result<QueryResult, RetrievalError> {
        query.validate()?;
        let candidates = filter_records(archive, query)?;
        let episodes =
            rank_and_merge(&candidates, &query.content_terms, self.config.merge_gap, query.limit, self.ranker.as_ref());
        Ok(QueryResult { episodes, total_candidates: candidates.len(), parsed: query.clone() })
    }

    pub fn execute_traced(
        &self,
        archive: &Archive,
        text: &str,
        now_utc: i64,
        tz: Tz,
        options: &QueryOptions,
    ) -> Result<(QueryResult, ParseDiagnostics), RetrievalError> {
        let (mut query, diagnostics) = self.parse(text, now_utc, tz)?;
        if let Some(ids) = &options.sessions {
            query.session_scope = SessionScope::Sessions(ids.clone());
        }
        if let Some(limit) = options.limit {
            query.limit = limit;
        }
        Ok((self.execute_structured(archive, &query)?, diagnostics))
    }

    /// Natural-language query end to end.
    pub fn execute(
        &self,
        archive: &Archive,
        text: &str,
        now_utc: i64,
        tz: Tz,
        options: &QueryOptions,
    ) -> Result<QueryResult, RetrievalError> {
        self.execute_traced(archive, text, now_utc, tz, options).map(|(r, _)| r)
    }
}
