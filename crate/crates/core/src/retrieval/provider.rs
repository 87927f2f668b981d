//! Remote query parsing with a rules fallback.
//!
//! A provider receives only the query text, the clock and the timezone,
//! never archive data. Whatever it returns must deserialize into a valid
//! `StructuredQuery`; anything else falls back to the rule parser.

use chrono_tz::Tz;
use serde::Serialize;
use thiserror::Error;

use super::grammar::{parse_query_rules, Grammar, Thresholds};
use super::query::{query_schema, StructuredQuery};
use super::RetrievalError;

#[derive(Debug, Clone, Serialize)]
pub struct ProviderRequest {
    pub text: String,
    pub now_utc: i64,
    pub timezone: String,
    pub schema: serde_json::Value,
}

impl ProviderRequest {
    pub fn new(text: &str, now_utc: i64, tz: Tz) -> Self {
        ProviderRequest { text: text.to_string(), now_utc, timezone: tz.name().to_string(), schema: query_schema() }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("provider timed out")]
    Timeout,
    #[error("provider transport error: {0}")]
    Transport(String),
    #[error("provider returned status {0}")]
    Status(u16),
}

/// An external query parser. Returns the raw response body.
pub trait QueryProvider: Send + Sync {
    fn parse(&self, request: &ProviderRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseSource {
    Rules,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseDiagnostics {
    pub source: ParseSource,
    pub fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ParseDiagnostics {
    pub fn rules() -> Self {
        ParseDiagnostics { source: ParseSource::Rules, fallback: false, note: None }
    }
}

/// Validates a provider response body.
pub fn decode_provider_response(body: &str) -> Result<StructuredQuery, String> {
    let q: StructuredQuery = serde_json::from_str(body).map_err(|e| format!("invalid provider response: {e}"))?;
    q.validate().map_err(|e| e.to_string())?;
    Ok(q)
}

/// Asks `provider` first; on any failure returns the rule parser's result
/// with `fallback` set in the diagnostics.
pub fn parse_query_llm(
    text: &str,
    now_utc: i64,
    tz: Tz,
    provider: &dyn QueryProvider,
    grammar: &Grammar,
    thresholds: &Thresholds,
) -> Result<(StructuredQuery, ParseDiagnostics), RetrievalError> {
    if text.trim().is_empty() {
        return Err(RetrievalError::UnparsableQuery);
    }
    let note = match provider.parse(&ProviderRequest::new(text, now_utc, tz)) {
        Ok(body) => match decode_provider_response(&body) {
            Ok(q) => return Ok((q, ParseDiagnostics { source: ParseSource::Provider, fallback: false, note: None })),
            Err(e) => e,
        },
        Err(e) => e.to_string(),
    };
    let q = parse_query_rules(text, now_utc, tz, grammar, thresholds)?;
    Ok((q, ParseDiagnostics { source: ParseSource::Rules, fallback: true, note: Some(note) }))
}
