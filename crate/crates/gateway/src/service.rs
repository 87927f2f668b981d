//! Operations shared by the HTTP API and the CLI.
//!
//! Ingested streams are validated and redacted, then staged as JSON lines
//! under `<session>/staging/`. Finalizing aligns the staged streams in one
//! batch, appends the records to the archive, writes a marker and drops
//! the staging directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use chrono_tz::Tz;
use recall_core::alignment::align_session;
use recall_core::archive::{Archive, SessionInfo, SessionStats};
use recall_core::domain::{
    manifest_from_json, EpisodicRecord, GazeEvent, Modality, PhysioSample, SessionManifest, TranscriptSegment,
};
use recall_core::ingestion::{
    parse_gaze_stream, parse_physio_stream, parse_transcript_stream, redact_excluded_speakers, IngestReport,
};
use recall_core::retrieval::{Grammar, QueryEngine, QueryOptions, QueryResult};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::GatewayError;
use crate::provider::HttpProvider;

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

pub const STAGING_DIR: &str = "staging";
pub const FINALIZED_FILE: &str = "finalized.json";

/// One of the three raw input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Transcript,
    Physio,
    Gaze,
}

impl StreamKind {
    pub const ALL: [StreamKind; 3] = [StreamKind::Transcript, StreamKind::Physio, StreamKind::Gaze];

    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Transcript => "transcript",
            StreamKind::Physio => "physio",
            StreamKind::Gaze => "gaze",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            StreamKind::Transcript => Modality::Speech,
            StreamKind::Physio => Modality::Physio,
            StreamKind::Gaze => Modality::Gaze,
        }
    }

    /// Conventional file name of the raw stream in a session directory.
    pub fn file_name(self) -> &'static str {
        match self {
            StreamKind::Transcript => "transcript.jsonl",
            StreamKind::Physio => "physio.csv",
            StreamKind::Gaze => "gaze.jsonl",
        }
    }

    fn staged_name(self) -> &'static str {
        match self {
            StreamKind::Transcript => "transcript.jsonl",
            StreamKind::Physio => "physio.jsonl",
            StreamKind::Gaze => "gaze.jsonl",
        }
    }
}

impl std::str::FromStr for StreamKind {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transcript" => Ok(StreamKind::Transcript),
            "physio" => Ok(StreamKind::Physio),
            "gaze" => Ok(StreamKind::Gaze),
            other => Err(GatewayError::UnknownStream(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestOutcome {
    pub session_id: String,
    pub stream: StreamKind,
    #[serde(flatten)]
    pub report: IngestReport,
    /// Accepted transcript segments dropped because their speaker is excluded.
    pub redacted: usize,
    /// Items staged for this stream so far, across all ingest calls.
    pub staged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeOutcome {
    pub session_id: String,
    pub record_count: u64,
    /// True when the session had been finalized before this call.
    pub already_finalized: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsentPatch {
    pub capture_enabled: Option<bool>,
    pub modalities_enabled: Option<BTreeSet<Modality>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub info: SessionInfo,
    pub finalized: bool,
    pub staged: BTreeMap<StreamKind, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    pub session_id: String,
    pub from: Option<i64>,
    pub to: Option<i64>,
    pub records: Vec<EpisodicRecord>,
}

pub fn now_utc_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64)
}

fn lock(m: &Mutex<()>) -> MutexGuard<'_, ()> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Reads complete JSON lines; a trailing partial line is ignored.
fn read_staged<T: DeserializeOwned>(path: &PathBuf) -> Result<Vec<T>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    bytes[..end]
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| {
            serde_json::from_slice(l)
                .map_err(|e| GatewayError::Internal(format!("staged data in {} unreadable: {e}", path.display())))
        })
        .collect()
}

fn count_lines(path: &PathBuf) -> usize {
    fs::read(path).map_or(0, |b| b.iter().filter(|&&c| c == b'\n').count())
}

pub struct Service {
    config: ServiceConfig,
    archive: Archive,
    engine: QueryEngine,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Service {
    pub fn new(config: ServiceConfig) -> Result<Self> {
        fs::create_dir_all(&config.archive_root)?;
        let archive = Archive::open(&config.archive_root)?.with_elevated_threshold(config.elevated_threshold);
        let mut engine = QueryEngine::new(config.query_config());
        if let Some(path) = &config.grammar_path {
            engine = engine.with_grammar(Grammar::load(path)?);
        }
        if config.llm_enabled {
            if let Some(endpoint) = &config.llm_endpoint {
                engine = engine.with_provider(Box::new(HttpProvider::new(endpoint, config.llm_timeout())));
            }
        }
        Ok(Service { config, archive, engine, locks: Mutex::new(HashMap::new()) })
    }

    /// Replaces the query engine, e.g. to install a different provider.
    pub fn with_engine(mut self, engine: QueryEngine) -> Self {
        self.engine = engine;
        self
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn engine(&self) -> &QueryEngine {
        &self.engine
    }

    fn session_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(id.to_string()).or_default().clone()
    }

    fn staging_dir(&self, id: &str) -> PathBuf {
        self.archive.session_dir(id).join(STAGING_DIR)
    }

    fn staged_path(&self, id: &str, kind: StreamKind) -> PathBuf {
        self.staging_dir(id).join(kind.staged_name())
    }

    fn marker_path(&self, id: &str) -> PathBuf {
        self.archive.session_dir(id).join(FINALIZED_FILE)
    }

    pub fn is_finalized(&self, id: &str) -> bool {
        self.marker_path(id).is_file()
    }

    pub fn create_session(&self, manifest_json: &str) -> Result<SessionManifest> {
        let manifest = manifest_from_json(manifest_json)?;
        self.archive.create_session(&manifest)?;
        Ok(manifest)
    }

    pub fn update_consent(&self, id: &str, patch: ConsentPatch) -> Result<SessionManifest> {
        let guard = self.session_lock(id);
        let _g = lock(&guard);
        Ok(self.archive.update_consent(id, patch.capture_enabled, patch.modalities_enabled)?)
    }

    pub fn list_sessions(&self) -> Result<Vec<SessionView>> {
        self.archive.list_sessions()?.iter().map(|id| self.session(id)).collect()
    }

    pub fn session(&self, id: &str) -> Result<SessionView> {
        let info = self.archive.session_info(id)?;
        let staged = StreamKind::ALL.into_iter().map(|k| (k, count_lines(&self.staged_path(id, k)))).collect();
        Ok(SessionView { info, finalized: self.is_finalized(id), staged })
    }

    /// Validates a raw stream body, redacts excluded speakers and stages
    /// the accepted items. Nothing from a rejected or redacted line is
    /// written anywhere.
    pub fn ingest(&self, id: &str, kind: StreamKind, body: &[u8]) -> Result<IngestOutcome> {
        let guard = self.session_lock(id);
        let _g = lock(&guard);
        let manifest = self.archive.manifest(id)?;
        if !manifest.capture_enabled {
            return Err(recall_core::archive::ArchiveError::ConsentDisabled(id.to_string()).into());
        }
        if !manifest.modality_enabled(kind.modality()) {
            return Err(GatewayError::ModalityDisabled { session: id.to_string(), modality: kind.modality() });
        }
        if self.is_finalized(id) {
            return Err(GatewayError::SessionFinalized(id.to_string()));
        }

        let mut buf = Vec::new();
        let (report, redacted) = match kind {
            StreamKind::Transcript => {
                let (segs, report) = parse_transcript_stream(body)?;
                let before = segs.len();
                let segs = redact_excluded_speakers(segs, &manifest);
                let redacted = before - segs.len();
                for s in &segs {
                    serde_json::to_writer(&mut buf, s).expect("segment serializes");
                    buf.push(b'\n');
                }
                (report, redacted)
            }
            StreamKind::Physio => {
                let (samples, report) = parse_physio_stream(body)?;
                for s in &samples {
                    serde_json::to_writer(&mut buf, s).expect("sample serializes");
                    buf.push(b'\n');
                }
                (report, 0)
            }
            StreamKind::Gaze => {
                let (events, report) = parse_gaze_stream(body)?;
                for e in &events {
                    serde_json::to_writer(&mut buf, e).expect("event serializes");
                    buf.push(b'\n');
                }
                (report, 0)
            }
        };

        let path = self.staged_path(id, kind);
        if !buf.is_empty() {
            fs::create_dir_all(self.staging_dir(id))?;
            truncate_torn_tail(&path)?;
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            f.write_all(&buf)?;
            f.sync_data()?;
        }
        Ok(IngestOutcome { session_id: id.to_string(), stream: kind, report, redacted, staged: count_lines(&path) })
    }

    /// Aligns everything staged for the session and archives the records.
    /// Calling it again on a finalized session returns the stored count.
    pub fn finalize(&self, id: &str) -> Result<FinalizeOutcome> {
        let guard = self.session_lock(id);
        let _g = lock(&guard);
        let manifest = self.archive.manifest(id)?;
        let existing = self.archive.index(id)?.record_count;
        if self.is_finalized(id) {
            return Ok(FinalizeOutcome { session_id: id.to_string(), record_count: existing, already_finalized: true });
        }
        if !manifest.capture_enabled {
            return Err(recall_core::archive::ArchiveError::ConsentDisabled(id.to_string()).into());
        }
        // A previous call may have appended and then died before writing
        // the marker; its records are the finalized result.
        let record_count = if existing > 0 {
            existing
        } else {
            let segments: Vec<TranscriptSegment> = read_staged(&self.staged_path(id, StreamKind::Transcript))?;
            let segments = redact_excluded_speakers(segments, &manifest);
            let physio: Vec<PhysioSample> = read_staged(&self.staged_path(id, StreamKind::Physio))?;
            let gaze: Vec<GazeEvent> = read_staged(&self.staged_path(id, StreamKind::Gaze))?;
            let records = align_session(&manifest, &segments, &physio, &gaze)?;
            self.archive.append_records(id, &records)?
        };
        let outcome = FinalizeOutcome { session_id: id.to_string(), record_count, already_finalized: false };
        write_marker(&self.marker_path(id), &outcome)?;
        match fs::remove_dir_all(self.staging_dir(id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
        Ok(outcome)
    }

    pub fn query(
        &self,
        text: &str,
        sessions: Option<BTreeSet<String>>,
        limit: Option<usize>,
        tz: Option<Tz>,
    ) -> Result<QueryResult> {
        self.query_at(text, sessions, limit, tz, now_utc_ms())
    }

    pub fn query_at(
        &self,
        text: &str,
        sessions: Option<BTreeSet<String>>,
        limit: Option<usize>,
        tz: Option<Tz>,
        now_utc: i64,
    ) -> Result<QueryResult> {
        let tz = tz.unwrap_or_else(|| self.config.default_tz());
        let options = QueryOptions { sessions, limit };
        Ok(self.engine.execute(&self.archive, text, now_utc, tz, &options)?)
    }

    pub fn timeline(&self, id: &str, from: Option<i64>, to: Option<i64>) -> Result<Timeline> {
        let records = match (from, to) {
            (None, None) => self.archive.read_all(id)?,
            (f, t) => self.archive.read_range(id, f.unwrap_or(i64::MIN), t.unwrap_or(i64::MAX))?,
        };
        Ok(Timeline { session_id: id.to_string(), from, to, records })
    }

    pub fn stats(&self, id: &str, from: Option<i64>, to: Option<i64>) -> Result<SessionStats> {
        let range = match (from, to) {
            (None, None) => None,
            (f, t) => Some((f.unwrap_or(i64::MIN), t.unwrap_or(i64::MAX))),
        };
        Ok(self.archive.compute_stats(id, range)?)
    }

    pub fn delete_session(&self, id: &str) -> Result<()> {
        let guard = self.session_lock(id);
        let _g = lock(&guard);
        Ok(self.archive.delete_session(id)?)
    }

    pub fn delete_range(&self, id: &str, from: i64, to: i64) -> Result<u64> {
        let guard = self.session_lock(id);
        let _g = lock(&guard);
        Ok(self.archive.delete_time_range(id, from, to)?)
    }

    pub fn apply_retention(&self, now_utc: i64) -> Result<BTreeMap<String, u64>> {
        Ok(self.archive.apply_retention(now_utc)?)
    }
}

fn truncate_torn_tail(path: &PathBuf) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(keep as u64)?;
        f.sync_all()?;
    }
    Ok(())
}

fn write_marker(path: &PathBuf, outcome: &FinalizeOutcome) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = File::create(&tmp)?;
        serde_json::to_writer(&mut f, outcome).expect("outcome serializes");
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

/// Reads the conventional stream files present in `dir`.
pub fn read_stream_files(dir: &std::path::Path) -> Result<Vec<(StreamKind, Vec<u8>)>> {
    let mut out = Vec::new();
    for kind in StreamKind::ALL {
        let path = dir.join(kind.file_name());
        if path.is_file() {
            out.push((kind, fs::read(&path)?));
        }
    }
    Ok(out)
}
