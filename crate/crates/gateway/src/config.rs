//! Service configuration: a flat TOML document whose keys can each be
//! overridden by an environment variable of the same name in upper case.

use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono_tz::Tz;
use recall_core::domain::parse_timezone;
use recall_core::retrieval::{QueryConfig, Thresholds};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub archive_root: PathBuf,
    pub bind_address: String,
    /// Stress above this is "elevated".
    pub elevated_threshold: f64,
    /// Stress below the negation of this is "calm".
    pub calm_threshold: f64,
    pub focus_threshold: f64,
    pub merge_gap: i64,
    pub llm_enabled: bool,
    pub llm_endpoint: Option<String>,
    pub llm_timeout_ms: u64,
    pub timezone_default: String,
    /// Replaces the built-in query grammar.
    pub grammar_path: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            archive_root: PathBuf::from("recall-data"),
            bind_address: "127.0.0.1:7878".into(),
            elevated_threshold: 1.0,
            calm_threshold: 0.5,
            focus_threshold: 0.6,
            merge_gap: 2,
            llm_enabled: false,
            llm_endpoint: None,
            llm_timeout_ms: 5_000,
            timezone_default: "UTC".into(),
            grammar_path: None,
        }
    }
}

const KEYS: &[&str] = &[
    "archive_root",
    "bind_address",
    "elevated_threshold",
    "calm_threshold",
    "focus_threshold",
    "merge_gap",
    "llm_enabled",
    "llm_endpoint",
    "llm_timeout_ms",
    "timezone_default",
    "grammar_path",
];

fn env_value(key: &str, raw: String) -> Result<toml::Value, ConfigError> {
    let bad = |reason: String| ConfigError::Parse(format!("{}: {reason}", key.to_uppercase()));
    Ok(match key {
        "elevated_threshold" | "calm_threshold" | "focus_threshold" => {
            toml::Value::Float(raw.trim().parse().map_err(|_| bad(format!("`{raw}` is not a number")))?)
        }
        "merge_gap" | "llm_timeout_ms" => {
            toml::Value::Integer(raw.trim().parse().map_err(|_| bad(format!("`{raw}` is not an integer")))?)
        }
        "llm_enabled" => match raw.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => toml::Value::Boolean(true),
            "0" | "false" | "no" | "off" => toml::Value::Boolean(false),
            _ => return Err(bad(format!("`{raw}` is not a boolean"))),
        },
        _ => toml::Value::String(raw),
    })
}

impl ServiceConfig {
    /// Builds the configuration from optional file text and an environment
    /// lookup, then validates it.
    pub fn from_sources(file_text: Option<&str>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut table: toml::Table = match file_text {
            Some(text) => text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        for key in KEYS {
            if let Some(raw) = env(&key.to_uppercase()) {
                table.insert(key.to_string(), env_value(key, raw)?);
            }
        }
        // Integers are accepted where a float is expected.
        for key in ["elevated_threshold", "calm_threshold", "focus_threshold"] {
            if let Some(toml::Value::Integer(i)) = table.get(key) {
                let f = *i as f64;
                table.insert(key.into(), toml::Value::Float(f));
            }
        }
        let config: ServiceConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` if given and applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.into(), source })?),
            None => None,
        };
        Self::from_sources(text.as_deref(), |k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, v) in [
            ("elevated_threshold", self.elevated_threshold),
            ("calm_threshold", self.calm_threshold),
            ("focus_threshold", self.focus_threshold),
        ] {
            if !v.is_finite() {
                return Err(ConfigError::Invalid { key, reason: "must be finite".into() });
            }
        }
        if !(0.0..=1.0).contains(&self.focus_threshold) {
            return Err(ConfigError::Invalid { key: "focus_threshold", reason: "must lie in [0, 1]".into() });
        }
        if self.merge_gap < 0 {
            return Err(ConfigError::Invalid { key: "merge_gap", reason: "must be nonnegative".into() });
        }
        parse_timezone(&self.timezone_default)
            .map_err(|e| ConfigError::Invalid { key: "timezone_default", reason: e.to_string() })?;
        if self.llm_enabled && self.llm_endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return Err(ConfigError::Invalid { key: "llm_endpoint", reason: "required when llm_enabled".into() });
        }
        Ok(())
    }

    pub fn default_tz(&self) -> Tz {
        parse_timezone(&self.timezone_default).unwrap_or(Tz::UTC)
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds { elevated: self.elevated_threshold, calm: self.calm_threshold, focus: self.focus_threshold }
    }

    pub fn query_config(&self) -> QueryConfig {
        QueryConfig { thresholds: self.thresholds(), merge_gap: self.merge_gap }
    }

    pub fn llm_timeout(&self) -> Duration {
        Duration::from_millis(self.llm_timeout_ms)
    }
}
