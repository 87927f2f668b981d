//! Append-only JSONL archive.
//!
//! Layout under the archive root:
//!
//! ```text
//! <root>/<session_id>/manifest.json
//! <root>/<session_id>/records.jsonl   one EpisodicRecord per line, sorted by second
//! <root>/<session_id>/index.json      cache; rebuilt from records.jsonl when stale
//! ```
//!
//! Appends are a single write of whole lines followed by fsync. Deletions
//! rewrite the record file into a temp file and rename it over the old
//! one, so a reader holding the old file keeps a consistent snapshot. A
//! trailing line without a newline is a torn append and is ignored by
//! readers and truncated by the next writer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_session_id, Channel, DomainError, EpisodicRecord, Modality, SessionManifest};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const INDEX_FILE: &str = "index.json";

/// Default stress threshold (z-units) above which a second counts as elevated.
pub const DEFAULT_ELEVATED_THRESHOLD: f64 = 1.0;

const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already exists")]
    SessionExists(String),
    #[error("capture is disabled for session `{0}`")]
    ConsentDisabled(String),
    #[error("append out of order: second {got} does not follow {last}")]
    OutOfOrderAppend { last: i64, got: i64 },
    #[error("invalid range [{from}, {to}]")]
    InvalidRange { from: i64, to: i64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("corrupt archive file {path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("archive I/O: {0}")]
    Io(#[from] io::Error),
}

impl ArchiveError {
    pub fn code(&self) -> &'static str {
        match self {
            ArchiveError::UnknownSession(_) => "UNKNOWN_SESSION",
            ArchiveError::SessionExists(_) => "SESSION_EXISTS",
            ArchiveError::ConsentDisabled(_) => "CONSENT_DISABLED",
            ArchiveError::OutOfOrderAppend { .. } => "OUT_OF_ORDER_APPEND",
            ArchiveError::InvalidRange { .. } => "INVALID_RANGE",
            ArchiveError::InvalidRecord(_) => "INVALID_RECORD",
            ArchiveError::Corrupt { .. } => "CORRUPT_ARCHIVE",
            ArchiveError::Domain(e) => e.code(),
            ArchiveError::Io(_) => "IO_ERROR",
        }
    }
}

pub type Result<T, E = ArchiveError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelSums {
    pub sum_of_means: f64,
    pub seconds: u64,
}

/// Sidecar cache of a session's record file. Never authoritative: it is
/// trusted only while `file_len` matches the record file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionIndex {
    pub file_len: u64,
    pub record_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_second: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_second: Option<i64>,
    #[serde(default)]
    pub channels: BTreeMap<Channel, ChannelSums>,
}

impl SessionIndex {
    fn add(&mut self, rec: &EpisodicRecord) {
        self.record_count += 1;
        self.min_second = Some(self.min_second.map_or(rec.second, |m| m.min(rec.second)));
        self.max_second = Some(self.max_second.map_or(rec.second, |m| m.max(rec.second)));
        if let Some(p) = &rec.physio {
            for (c, s) in p.channels() {
                let e = self.channels.entry(c).or_default();
                e.sum_of_means += s.mean;
                e.seconds += 1;
            }
        }
    }

    fn from_records(records: &[EpisodicRecord], file_len: u64) -> Self {
        let mut idx = SessionIndex { file_len, ..Default::default() };
        records.iter().for_each(|r| idx.add(r));
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionInfo {
    pub manifest: SessionManifest,
    pub record_count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_second: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_second: Option<i64>,
}

/// Aggregate statistics over a set of records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub record_count: u64,
    /// Seconds with a nonempty transcript.
    pub speech_seconds: u64,
    /// Sample-weighted mean heart rate.
    #[serde(rename = "mean_HR", skip_serializing_if = "Option::is_none")]
    pub mean_hr: Option<f64>,
    #[serde(rename = "mean_GSR", skip_serializing_if = "Option::is_none")]
    pub mean_gsr: Option<f64>,
    /// Fixations per minute of gaze-bearing records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixations_per_minute: Option<f64>,
    pub blink_count: u64,
    pub saccade_count: u64,
    pub elevated_stress_seconds: u64,
    /// Maximal runs of consecutive elevated seconds.
    pub elevated_episode_count: u64,
}

/// Computes `SessionStats` over records sorted by second.
pub fn session_stats(records: &[EpisodicRecord], elevated_threshold: f64) -> SessionStats {
    let mut st = SessionStats { record_count: records.len() as u64, ..Default::default() };
    let mut weighted = [(0.0, 0u64); 2];
    let (mut fixations, mut gaze_seconds) = (0u64, 0u64);
    let mut last_elevated: Option<i64> = None;
    for r in records {
        if !r.transcript.is_empty() {
            st.speech_seconds += 1;
        }
        if let Some(p) = &r.physio {
            for (c, s) in p.channels() {
                weighted[c as usize].0 += s.mean * f64::from(s.count);
                weighted[c as usize].1 += u64::from(s.count);
            }
        }
        if let Some(g) = &r.gaze {
            gaze_seconds += 1;
            fixations += u64::from(g.fixation_count);
            st.blink_count += u64::from(g.blink_count);
            st.saccade_count += u64::from(g.saccade_count);
        }
        if r.stress.is_some_and(|s| s > elevated_threshold) {
            st.elevated_stress_seconds += 1;
            if last_elevated != Some(r.second - 1) {
                st.elevated_episode_count += 1;
            }
            last_elevated = Some(r.second);
        }
    }
    let mean = |(sum, n): (f64, u64)| (n > 0).then(|| sum / n as f64);
    st.mean_hr = mean(weighted[0]);
    st.mean_gsr = mean(weighted[1]);
    st.fixations_per_minute = (gaze_seconds > 0).then(|| fixations as f64 * 60.0 / gaze_seconds as f64);
    st
}

fn check_range(from: i64, to: i64) -> Result<()> {
    if from > to {
        Err(ArchiveError::InvalidRange { from, to })
    } else {
        Ok(())
    }
}

/// Length of the prefix of `bytes` made of complete (newline-terminated) lines.
fn complete_prefix_len(bytes: &[u8]) -> usize {
    bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1)
}

fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<EpisodicRecord>> {
    let complete = &bytes[..complete_prefix_len(bytes)];
    let mut out = Vec::new();
    for (i, line) in complete.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let corrupt = |reason: String| ArchiveError::Corrupt { path: path.to_path_buf(), line: i + 1, reason };
        let rec: EpisodicRecord = serde_json::from_slice(line).map_err(|e| corrupt(e.to_string()))?;
        rec.validate().map_err(|e| corrupt(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

fn encode_records(records: &[EpisodicRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    buf
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

/// Writes `bytes` to `path` through a temp file and rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("archive files live in a session directory");
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    sync_dir(dir)
}

/// An archive rooted at one local directory.
#[derive(Debug)]
pub struct Archive {
    root: PathBuf,
    elevated_threshold: f64,
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Archive {
    /// Opens (creating if needed) the archive at `root`, repairing torn
    /// record tails and stale indexes.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let archive = Archive {
            root,
            elevated_threshold: DEFAULT_ELEVATED_THRESHOLD,
            writers: Mutex::new(HashMap::new()),
        };
        for id in archive.list_sessions()? {
            let writer = archive.writer_lock(&id);
            let _w = lock(&writer);
            archive.repair_tail(&id)?;
            archive.index(&id)?;
        }
        Ok(archive)
    }

    pub fn with_elevated_threshold(mut self, threshold: f64) -> Self {
        self.elevated_threshold = threshold;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn elevated_threshold(&self) -> f64 {
        self.elevated_threshold
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn records_path(&self, id: &str) -> PathBuf {
        self.session_dir(id).join(RECORDS_FILE)
    }

    fn writer_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.writers.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(id.to_string()).or_default().clone()
    }

    /// Session ids in lexicographic order.
    pub fn list_sessions(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if validate_session_id(&name).is_ok() && entry.path().join(MANIFEST_FILE).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn has_session(&self, id: &str) -> bool {
        validate_session_id(id).is_ok() && self.session_dir(id).join(MANIFEST_FILE).is_file()
    }

    fn require(&self, id: &str) -> Result<()> {
        if self.has_session(id) {
            Ok(())
        } else {
            Err(ArchiveError::UnknownSession(id.to_string()))
        }
    }

    /// Reads the manifest from disk. Never cached, so consent changes apply
    /// to the very next operation.
    pub fn manifest(&self, id: &str) -> Result<SessionManifest> {
        self.require(id)?;
        let text = fs::read_to_string(self.session_dir(id).join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| ArchiveError::Corrupt {
            path: self.session_dir(id).join(MANIFEST_FILE),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    fn write_manifest(&self, manifest: &SessionManifest) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        text.push(b'\n');
        write_atomic(&self.session_dir(&manifest.session_id).join(MANIFEST_FILE), &text)?;
        Ok(())
    }

    pub fn create_session(&self, manifest: &SessionManifest) -> Result<()> {
        validate_session_id(&manifest.session_id)?;
        let writer = self.writer_lock(&manifest.session_id);
        let _w = lock(&writer);
        if self.has_session(&manifest.session_id) {
            return Err(ArchiveError::SessionExists(manifest.session_id.clone()));
        }
        let dir = self.session_dir(&manifest.session_id);
        fs::create_dir_all(&dir)?;
        File::create(dir.join(RECORDS_FILE))?.sync_all()?;
        self.write_index(&manifest.session_id, &SessionIndex::default())?;
        self.write_manifest(manifest)?;
        sync_dir(&self.root)?;
        Ok(())
    }

    /// Changes the consent flag and/or the enabled modalities.
    pub fn update_consent(
        &self,
        id: &str,
        capture_enabled: Option<bool>,
        modalities_enabled: Option<BTreeSet<Modality>>,
    ) -> Result<SessionManifest> {
        let writer = self.writer_lock(id);
        let _w = lock(&writer);
        let mut m = self.manifest(id)?;
        if let Some(c) = capture_enabled {
            m.capture_enabled = c;
        }
        if let Some(mods) = modalities_enabled {
            m.modalities_enabled = mods;
        }
        self.write_manifest(&m)?;
        Ok(m)
    }

    fn read_bytes(&self, id: &str) -> Result<Vec<u8>> {
        match fs::read(self.records_path(id)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Every stored record of a session, in order.
    pub fn read_all(&self, id: &str) -> Result<Vec<EpisodicRecord>> {
        self.require(id)?;
        parse_records(&self.records_path(id), &self.read_bytes(id)?)
    }

    /// Stored records with `second` in `[from, to]`.
    pub fn read_range(&self, id: &str, from: i64, to: i64) -> Result<Vec<EpisodicRecord>> {
        check_range(from, to)?;
        let mut recs = self.read_all(id)?;
        recs.retain(|r| (from..=to).contains(&r.second));
        Ok(recs)
    }

    fn index_path(&self, id: &str) -> PathBuf {
        self.session_dir(id).join(INDEX_FILE)
    }

    fn write_index(&self, id: &str, index: &SessionIndex) -> Result<()> {
        let text = serde_json::to_vec(index).expect("index serializes");
        write_atomic(&self.index_path(id), &text)?;
        Ok(())
    }

    /// The session index, rebuilt by a full scan whenever the cached copy
    /// does not describe the current record file.
    pub fn index(&self, id: &str) -> Result<SessionIndex> {
        self.require(id)?;
        let bytes = self.read_bytes(id)?;
        let len = complete_prefix_len(&bytes) as u64;
        let cached = fs::read(self.index_path(id))
            .ok()
            .and_then(|b| serde_json::from_slice::<SessionIndex>(&b).ok());
        if let Some(idx) = cached.filter(|i| i.file_len == len) {
            return Ok(idx);
        }
        let idx = SessionIndex::from_records(&parse_records(&self.records_path(id), &bytes)?, len);
        self.write_index(id, &idx)?;
        Ok(idx)
    }

    pub fn session_info(&self, id: &str) -> Result<SessionInfo> {
        let manifest = self.manifest(id)?;
        let idx = self.index(id)?;
        Ok(SessionInfo {
            manifest,
            record_count: idx.record_count,
            min_second: idx.min_second,
            max_second: idx.max_second,
        })
    }

    /// Drops a torn trailing line left by an interrupted append.
    fn repair_tail(&self, id: &str) -> Result<()> {
        let path = self.records_path(id);
        let bytes = self.read_bytes(id)?;
        let keep = complete_prefix_len(&bytes);
        if keep < bytes.len() {
            let f = OpenOptions::new().write(true).open(&path)?;
            f.set_len(keep as u64)?;
            f.sync_all()?;
        }
        Ok(())
    }

    /// Appends records after the session's current last second. All
    /// records are written with one write call; returns the new count.
    pub fn append_records(&self, id: &str, records: &[EpisodicRecord]) -> Result<u64> {
        let writer = self.writer_lock(id);
        let _w = lock(&writer);
        let manifest = self.manifest(id)?;
        if !manifest.capture_enabled {
            return Err(ArchiveError::ConsentDisabled(id.to_string()));
        }
        self.repair_tail(id)?;
        let mut index = self.index(id)?;
        let mut last = index.max_second;
        for r in records {
            r.validate()?;
            if r.session_id != id {
                return Err(ArchiveError::InvalidRecord(format!("record for `{}` appended to `{id}`", r.session_id)));
            }
            if r.ts_utc != manifest.second_to_utc(r.second) {
                return Err(ArchiveError::InvalidRecord(format!("ts_utc of second {} disagrees with manifest", r.second)));
            }
            if let Some(l) = last.filter(|&l| r.second <= l) {
                return Err(ArchiveError::OutOfOrderAppend { last: l, got: r.second });
            }
            last = Some(r.second);
        }
        if records.is_empty() {
            return Ok(index.record_count);
        }
        let buf = encode_records(records);
        let mut f = OpenOptions::new().append(true).create(true).open(self.records_path(id))?;
        f.write_all(&buf)?;
        f.sync_data()?;
        index.file_len += buf.len() as u64;
        records.iter().for_each(|r| index.add(r));
        self.write_index(id, &index)?;
        Ok(index.record_count)
    }

    /// Stats over the whole session or over `[from, to]`.
    pub fn compute_stats(&self, id: &str, range: Option<(i64, i64)>) -> Result<SessionStats> {
        let recs = match range {
            Some((from, to)) => self.read_range(id, from, to)?,
            None => self.read_all(id)?,
        };
        Ok(session_stats(&recs, self.elevated_threshold))
    }

    /// Removes the session directory. The directory is first renamed out of
    /// the namespace so no reader can observe a half-deleted session.
    pub fn delete_session(&self, id: &str) -> Result<()> {
        let writer = self.writer_lock(id);
        let _w = lock(&writer);
        self.require(id)?;
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
        let graveyard = self.root.join(format!(".deleted-{id}-{nanos}"));
        fs::rename(self.session_dir(id), &graveyard)?;
        sync_dir(&self.root)?;
        fs::remove_dir_all(&graveyard)?;
        Ok(())
    }

    fn rewrite_retaining(&self, id: &str, keep: impl Fn(&EpisodicRecord) -> bool) -> Result<u64> {
        self.repair_tail(id)?;
        let records = self.read_all(id)?;
        let before = records.len();
        let kept: Vec<EpisodicRecord> = records.into_iter().filter(|r| keep(r)).collect();
        let removed = (before - kept.len()) as u64;
        if removed > 0 {
            let buf = encode_records(&kept);
            write_atomic(&self.records_path(id), &buf)?;
            self.write_index(id, &SessionIndex::from_records(&kept, buf.len() as u64))?;
        }
        Ok(removed)
    }

    /// Permanently removes records with `second` in `[from, to]`.
    pub fn delete_time_range(&self, id: &str, from: i64, to: i64) -> Result<u64> {
        check_range(from, to)?;
        let writer = self.writer_lock(id);
        let _w = lock(&writer);
        self.require(id)?;
        self.rewrite_retaining(id, |r| !(from..=to).contains(&r.second))
    }

    /// Deletes records older than each session's retention window. Sessions
    /// without a retention limit are untouched; manifests are kept.
    pub fn apply_retention(&self, now_utc_ms: i64) -> Result<BTreeMap<String, u64>> {
        let mut removed = BTreeMap::new();
        for id in self.list_sessions()? {
            let writer = self.writer_lock(&id);
            let _w = lock(&writer);
            let Ok(manifest) = self.manifest(&id) else { continue };
            let n = match manifest.retention_days {
                Some(days) => {
                    let cutoff = now_utc_ms - i64::from(days) * MS_PER_DAY;
                    self.rewrite_retaining(&id, |r| r.ts_utc >= cutoff)?
                }
                None => 0,
            };
            removed.insert(id, n);
        }
        Ok(removed)
    }
}

fn lock(m: &Mutex<()>) -> MutexGuard<'_, ()> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}
