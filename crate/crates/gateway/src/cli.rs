//! `recall` command line. Exit status: 0 on success, 1 on a domain error
//! (its code is printed on stderr), 2 on a usage error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use chrono_tz::Tz;
use clap::{Args, Parser, Subcommand, ValueEnum};
use recall_core::domain::{parse_timezone, validate_manifest, Modality, RawManifest};
use recall_core::retrieval::{Episode, QueryResult};

use crate::config::ServiceConfig;
use crate::error::GatewayError;
use crate::service::{now_utc_ms, read_stream_files, Service, StreamKind};

#[derive(Debug, Parser)]
#[command(name = "recall", version, about = "Local multimodal episodic memory")]
pub struct Cli {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Archive directory; overrides the configured one.
    #[arg(long, global = true)]
    pub archive: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a session from a manifest file or from flags.
    Init(InitArgs),
    /// Validate and stage raw streams for a session.
    Ingest(IngestArgs),
    /// Align staged streams and archive the records.
    Finalize(SessionArg),
    /// Ask a natural-language question.
    Query(QueryArgs),
    /// Print archived records, one JSON object per line.
    Timeline(RangeArgs),
    /// Print session statistics.
    Stats(RangeArgs),
    /// Delete a whole session, or the seconds in --from..=--to.
    Delete(RangeArgs),
    /// Apply every session's retention window.
    Retention(RetentionArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SessionArg {
    #[arg(long)]
    pub session: String,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Manifest JSON file, used in place of --session and the flags below.
    #[arg(long, conflicts_with = "session")]
    pub manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    pub session: Option<String>,
    /// Session start, Unix ms.
    #[arg(long)]
    pub started_at: Option<i64>,
    #[arg(long)]
    pub timezone: Option<String>,
    /// Opt in to capture. Sessions are created with capture off otherwise.
    #[arg(long)]
    pub capture_enabled: bool,
    /// Comma-separated subset of speech,physio,gaze.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<ModalityArg>>,
    #[arg(long = "exclude-speaker")]
    pub exclude_speakers: Vec<String>,
    #[arg(long)]
    pub retention_days: Option<u32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModalityArg {
    Speech,
    Physio,
    Gaze,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Speech => Modality::Speech,
            ModalityArg::Physio => Modality::Physio,
            ModalityArg::Gaze => Modality::Gaze,
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub session: String,
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub physio: Option<PathBuf>,
    #[arg(long)]
    pub gaze: Option<PathBuf>,
    /// Directory holding transcript.jsonl, physio.csv and/or gaze.jsonl.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub text: String,
    /// Comma-separated session ids.
    #[arg(long, value_delimiter = ',')]
    pub sessions: Option<Vec<String>>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub limit: Option<u64>,
    /// IANA timezone for relative dates; defaults to the configured one.
    #[arg(long)]
    pub tz: Option<String>,
    /// Reference time, Unix ms; defaults to now.
    #[arg(long)]
    pub now: Option<i64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct RangeArgs {
    #[arg(long)]
    pub session: String,
    #[arg(long, allow_negative_numbers = true)]
    pub from: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    pub to: Option<i64>,
}

#[derive(Debug, Args)]
pub struct RetentionArgs {
    /// Reference time, Unix ms; defaults to now.
    #[arg(long)]
    pub now: Option<i64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides the configured bind address.
    #[arg(long)]
    pub bind: Option<String>,
}

enum Failure {
    Domain(GatewayError),
    Usage(String),
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Failure::Domain(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.into())
    }
}

/// Parses `args` and runs the command, writing to the given streams.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            // Help and version requests are not errors.
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(Failure::Domain(e)) => {
            let _ = writeln!(err, "{}: {e}", e.code());
            1
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn load_config(cli: &Cli) -> Result<ServiceConfig, Failure> {
    let mut config = ServiceConfig::load(cli.config.as_deref()).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(root) = &cli.archive {
        config.archive_root = root.clone();
    }
    Ok(config)
}

fn range(from: Option<i64>, to: Option<i64>) -> Result<Option<(i64, i64)>, Failure> {
    match (from, to) {
        (None, None) => Ok(None),
        (Some(f), Some(t)) => Ok(Some((f, t))),
        _ => Err(Failure::Usage("--from and --to must be given together".into())),
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let config = load_config(&cli)?;
    let service = Service::new(config)?;
    match cli.command {
        Command::Init(a) => {
            let manifest = match &a.manifest {
                Some(path) => service.create_session(&std::fs::read_to_string(path)?)?,
                None => {
                    let raw = RawManifest {
                        session_id: a.session.clone(),
                        started_at: a.started_at,
                        timezone: a.timezone.clone(),
                        capture_enabled: Some(a.capture_enabled),
                        modalities_enabled: a.modalities.as_ref().map(|m| m.iter().map(|&x| x.into()).collect()),
                        excluded_speakers: Some(a.exclude_speakers.iter().cloned().collect()),
                        retention_days: a.retention_days,
                    };
                    let m = validate_manifest(raw).map_err(GatewayError::from)?;
                    service.create_session(&serde_json::to_string(&m).expect("manifest serializes"))?
                }
            };
            writeln!(out, "created session {}", manifest.session_id)?;
        }
        Command::Ingest(a) => {
            let mut streams: Vec<(StreamKind, Vec<u8>)> = match &a.dir {
                Some(dir) => read_stream_files(dir)?,
                None => Vec::new(),
            };
            for (kind, path) in [(StreamKind::Transcript, &a.transcript), (StreamKind::Physio, &a.physio), (StreamKind::Gaze, &a.gaze)] {
                if let Some(p) = path {
                    streams.retain(|(k, _)| *k != kind);
                    streams.push((kind, std::fs::read(p)?));
                }
            }
            if streams.is_empty() {
                return Err(Failure::Usage("nothing to ingest; pass --dir or a stream file".into()));
            }
            for (kind, body) in streams {
                let o = service.ingest(&a.session, kind, &body)?;
                write!(
                    out,
                    "{}: accepted {}, rejected {}, redacted {}, staged {}",
                    kind.as_str(),
                    o.report.accepted,
                    o.report.rejected,
                    o.redacted,
                    o.staged
                )?;
                match &o.report.first_error {
                    Some((line, reason)) => writeln!(out, " (first error line {line}: {reason})")?,
                    None => writeln!(out)?,
                }
            }
        }
        Command::Finalize(a) => {
            let o = service.finalize(&a.session)?;
            let note = if o.already_finalized { " (already finalized)" } else { "" };
            writeln!(out, "{}: {} records{note}", o.session_id, o.record_count)?;
        }
        Command::Query(a) => {
            let tz = a.tz.as_deref().map(parse_timezone).transpose().map_err(GatewayError::from)?;
            let sessions = a.sessions.map(|s| s.into_iter().collect::<BTreeSet<_>>());
            let result = service.query_at(
                &a.text,
                sessions,
                a.limit.map(|n| n as usize),
                tz,
                a.now.unwrap_or_else(now_utc_ms),
            )?;
            match a.format {
                Format::Jsonl => {
                    for e in &result.episodes {
                        writeln!(out, "{}", serde_json::to_string(e).expect("episode serializes"))?;
                    }
                }
                Format::Text => print_episodes(&service, &result, out)?,
            }
        }
        Command::Timeline(a) => {
            let t = service.timeline(&a.session, a.from, a.to)?;
            for r in &t.records {
                writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
            }
        }
        Command::Stats(a) => {
            let st = service.stats(&a.session, a.from, a.to)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&st).expect("stats serialize"))?;
        }
        Command::Delete(a) => match range(a.from, a.to)? {
            Some((from, to)) => {
                let removed = service.delete_range(&a.session, from, to)?;
                writeln!(out, "removed {removed}")?;
            }
            None => {
                service.delete_session(&a.session)?;
                writeln!(out, "deleted session {}", a.session)?;
            }
        },
        Command::Retention(a) => {
            let removed = service.apply_retention(a.now.unwrap_or_else(now_utc_ms))?;
            for (id, n) in removed {
                writeln!(out, "{id}: removed {n}")?;
            }
        }
        Command::Serve(a) => {
            let addr = a.bind.unwrap_or_else(|| service.config().bind_address.clone());
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::http::serve(Arc::new(service), &addr))?;
        }
    }
    Ok(())
}

fn local_time(ms: i64, tz: Tz) -> String {
    match Utc.timestamp_millis_opt(ms).single() {
        Some(t) => t.with_timezone(&tz).format("%Y-%m-%d %H:%M:%S").to_string(),
        None => ms.to_string(),
    }
}

fn describe(e: &Episode, tz: Tz) -> String {
    let mut line = format!(
        "{} [{}-{}] {} to {} {}  score {:.4}",
        e.session_id,
        e.from_second,
        e.to_second,
        local_time(e.start_utc, tz),
        local_time(e.end_utc, tz),
        tz.name(),
        e.score
    );
    if let Some(s) = e.context.mean_stress {
        line.push_str(&format!("  stress {s:.2}"));
    }
    if let Some(f) = e.context.mean_focus {
        line.push_str(&format!("  focus {f:.2}"));
    }
    line
}

fn print_episodes(service: &Service, result: &QueryResult, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "parsed: {}", serde_json::to_string(&result.parsed).expect("query serializes"))?;
    if result.episodes.is_empty() {
        return writeln!(out, "no matching episodes ({} candidate seconds)", result.total_candidates);
    }
    for (i, e) in result.episodes.iter().enumerate() {
        // Times are shown in the session's own timezone.
        let tz = service.archive().manifest(&e.session_id).map_or(Tz::UTC, |m| m.tz());
        writeln!(out, "{}. {}", i + 1, describe(e, tz))?;
        if !e.excerpt.is_empty() {
            writeln!(out, "   {}", e.excerpt)?;
        }
    }
    Ok(())
}
