//! Run persistence: one plain directory tree per run, append-only except for
//! the run record itself.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use policybank::bank::BankSnapshot;
use policybank::evaluation::{CompletedTask, StreamSink, TaskRecord};
use policybank::reviewer::InitOutcome;
use policybank::runtime::{FeedbackRequest, ReviewRecord, RunConfig};
use policybank::Trajectory;
use serde::{Deserialize, Serialize};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("run not found: {0}")]
    RunNotFound(String),
    #[error("artifact not found: {0}")]
    NotFound(String),
    #[error("integrity error: {0} already holds different content")]
    Integrity(String),
    #[error("invalid status transition {from:?} -> {to:?}")]
    Transition { from: RunStatus, to: RunStatus },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    WaitingFeedback,
    Done,
    Failed,
}

impl RunStatus {
    pub fn can_become(self, next: RunStatus) -> bool {
        use RunStatus::*;
        matches!(
            (self, next),
            (Running, Running | WaitingFeedback | Done | Failed)
                | (WaitingFeedback, Running | WaitingFeedback | Failed)
        )
    }

    pub fn is_active(self) -> bool {
        matches!(self, RunStatus::Running | RunStatus::WaitingFeedback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Live,
    Replay,
    Record,
    Scripted,
}

/// Everything needed to start or resume a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Built-in domain name or bundle directory.
    pub domain: String,
    pub config: RunConfig,
    pub provider: ProviderKind,
    /// Fixture directory for replay and record.
    #[serde(default)]
    pub fixtures: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub spec: RunSpec,
    pub status: RunStatus,
    pub created_at: String,
    pub updated_at: String,
    #[serde(default)]
    pub pending: Option<FeedbackRequest>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Relative paths of a run's artifacts, for clients.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub trajectories: Vec<String>,
    pub banks: Vec<String>,
    pub reviews: Vec<String>,
    pub records: Vec<String>,
    #[serde(default)]
    pub report: Option<String>,
}

pub fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn stream_dir(seed: u64, trial: u32) -> String {
    format!("streams/s{seed}-t{trial}")
}

pub fn bank_path(seed: u64, trial: u32, step: u32) -> String {
    if step == 0 {
        format!("banks/{}", BankSnapshot::file_name(0))
    } else {
        format!("{}/banks/{}", stream_dir(seed, trial), BankSnapshot::file_name(step))
    }
}

pub fn trajectory_path(seed: u64, trial: u32, task_id: &str) -> String {
    format!("{}/trajectories/{task_id}.jsonl", stream_dir(seed, trial))
}

pub fn record_path(seed: u64, trial: u32, task_id: &str) -> String {
    format!("{}/records/{task_id}.json", stream_dir(seed, trial))
}

pub fn review_path(seed: u64, trial: u32, step: u32) -> String {
    format!("{}/reviews/step_{step}.json", stream_dir(seed, trial))
}

pub fn feedback_path(seed: u64, trial: u32, task_id: &str) -> String {
    format!("{}/feedback/{task_id}.json", stream_dir(seed, trial))
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const INIT_REVIEW: &str = "reviews/init.json";
const RECORD_FILE: &str = "run.json";

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifacts serialize");
    bytes.push(b'\n');
    bytes
}

/// The root directory holding all runs.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    record_lock: Mutex<()>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Store {
            root,
            record_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn exists(&self, run_id: &str) -> bool {
        valid_segment(run_id) && self.run_dir(run_id).join(RECORD_FILE).is_file()
    }

    /// Creates a new run directory with a fresh id.
    pub fn create_run(&self, spec: RunSpec) -> Result<RunRecord, StoreError> {
        let _guard = self.record_lock.lock().unwrap_or_else(|p| p.into_inner());
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        let mut n = 1;
        let run_id = loop {
            let candidate = format!("run-{stamp}-{n}");
            let dir = self.run_dir(&candidate);
            match fs::create_dir(&dir) {
                Ok(()) => break candidate,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(io_err(&dir, e)),
            }
        };
        let now = now_utc();
        let record = RunRecord {
            run_id,
            spec,
            status: RunStatus::Running,
            created_at: now.clone(),
            updated_at: now,
            pending: None,
            error: None,
        };
        self.write_record_unlocked(&record)?;
        Ok(record)
    }

    pub fn record(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        if !self.exists(run_id) {
            return Err(StoreError::RunNotFound(run_id.to_string()));
        }
        let path = self.run_dir(run_id).join(RECORD_FILE);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| json_err(&path, e))
    }

    /// Applies `change` to the run record under the store lock. Status
    /// changes must follow the run lifecycle.
    pub fn update_record(&self, run_id: &str, change: impl FnOnce(&mut RunRecord)) -> Result<RunRecord, StoreError> {
        let _guard = self.record_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut record = self.record(run_id)?;
        let before = record.status;
        change(&mut record);
        if !before.can_become(record.status) {
            return Err(StoreError::Transition {
                from: before,
                to: record.status,
            });
        }
        record.updated_at = now_utc();
        self.write_record_unlocked(&record)?;
        Ok(record)
    }

    fn write_record_unlocked(&self, record: &RunRecord) -> Result<(), StoreError> {
        let path = self.run_dir(&record.run_id).join(RECORD_FILE);
        atomic_write(&path, &pretty(record))
    }

    /// All runs, newest first.
    pub fn list_runs(&self) -> Result<Vec<RunRecord>, StoreError> {
        let mut runs = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|e| io_err(&self.root, e))?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if self.exists(&name) {
                runs.push(self.record(&name)?);
            }
        }
        runs.sort_by(|a, b| b.created_at.cmp(&a.created_at).then(b.run_id.cmp(&a.run_id)));
        Ok(runs)
    }

    fn artifact(&self, run_id: &str, rel: &str) -> Result<PathBuf, StoreError> {
        if !self.exists(run_id) {
            return Err(StoreError::RunNotFound(run_id.to_string()));
        }
        if !rel.split('/').all(valid_segment) {
            return Err(StoreError::NotFound(rel.to_string()));
        }
        Ok(self.run_dir(run_id).join(rel))
    }

    /// Append-only write: identical re-puts are no-ops, different content
    /// under an existing path is an integrity error.
    pub fn put(&self, run_id: &str, rel: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.artifact(run_id, rel)?;
        if path.exists() {
            let existing = fs::read(&path).map_err(|e| io_err(&path, e))?;
            return if existing == bytes {
                Ok(())
            } else {
                Err(StoreError::Integrity(rel.to_string()))
            };
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        atomic_write(&path, bytes)
    }

    pub fn get(&self, run_id: &str, rel: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.artifact(run_id, rel)?;
        match fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(StoreError::NotFound(rel.to_string())),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub fn has(&self, run_id: &str, rel: &str) -> bool {
        self.artifact(run_id, rel).is_ok_and(|p| p.is_file())
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&self, run_id: &str, rel: &str) -> Result<T, StoreError> {
        let bytes = self.get(run_id, rel)?;
        serde_json::from_slice(&bytes).map_err(|e| json_err(Path::new(rel), e))
    }

    pub fn index(&self, run_id: &str) -> Result<ArtifactIndex, StoreError> {
        let dir = self.run_dir(run_id);
        if !self.exists(run_id) {
            return Err(StoreError::RunNotFound(run_id.to_string()));
        }
        let mut files = Vec::new();
        collect_files(&dir, &dir, &mut files);
        files.sort();
        let mut index = ArtifactIndex::default();
        for f in files {
            if f.ends_with(".jsonl") && f.contains("/trajectories/") {
                index.trajectories.push(f);
            } else if f.contains("banks/") {
                index.banks.push(f);
            } else if f.starts_with("reviews/") || f.contains("/reviews/") {
                index.reviews.push(f);
            } else if f.contains("/records/") {
                index.records.push(f);
            } else if f == REPORT_JSON {
                index.report = Some(f);
            }
        }
        Ok(index)
    }

    pub fn sink<'a>(&'a self, run_id: &'a str) -> RunSink<'a> {
        RunSink { store: self, run_id }
    }
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<String>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect_files(base, &path, out);
        } else if let Ok(rel) = path.strip_prefix(base) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if !rel.starts_with('.') && !rel.contains("/.") && rel != RECORD_FILE {
                out.push(rel);
            }
        }
    }
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\'])
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path, source: serde_json::Error) -> StoreError {
    StoreError::Json {
        path: path.display().to_string(),
        source,
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.{n}.tmp", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| io_err(path, e))
}

/// Persists one run's stream artifacts and answers resume queries.
pub struct RunSink<'a> {
    store: &'a Store,
    run_id: &'a str,
}

impl RunSink<'_> {
    fn put(&self, rel: &str, bytes: &[u8]) -> Result<(), String> {
        self.store.put(self.run_id, rel, bytes).map_err(|e| e.to_string())
    }

    fn bank(&self, seed: u64, trial: u32, step: u32) -> Option<BankSnapshot> {
        let bytes = self.store.get(self.run_id, &bank_path(seed, trial, step)).ok()?;
        BankSnapshot::from_file_bytes(&bytes).ok()
    }
}

impl StreamSink for RunSink<'_> {
    fn initial_bank(&self) -> Option<BankSnapshot> {
        self.bank(0, 0, 0)
    }

    fn put_initial_bank(&self, init: &InitOutcome) -> Result<(), String> {
        self.put(INIT_REVIEW, &pretty(init))?;
        self.put(&bank_path(0, 0, 0), &init.snapshot.to_file_bytes())
    }

    fn put_trajectory(&self, seed: u64, trial: u32, traj: &Trajectory) -> Result<(), String> {
        let text = traj.to_jsonl().map_err(|e| e.to_string())?;
        self.put(&trajectory_path(seed, trial, &traj.task_id), text.as_bytes())
    }

    fn put_review(&self, seed: u64, trial: u32, review: &ReviewRecord, snapshot: &BankSnapshot) -> Result<(), String> {
        self.put(&review_path(seed, trial, review.step), &pretty(review))?;
        self.put(&bank_path(seed, trial, snapshot.step), &snapshot.to_file_bytes())
    }

    fn put_task_record(&self, seed: u64, trial: u32, record: &TaskRecord) -> Result<(), String> {
        self.put(&record_path(seed, trial, &record.task_id), &pretty(record))
    }

    fn completed(&self, seed: u64, trial: u32, task_id: &str) -> Option<CompletedTask> {
        let record: TaskRecord = self
            .store
            .get_json(self.run_id, &record_path(seed, trial, task_id))
            .ok()?;
        let bank_after = record.bank_step_after.and_then(|s| self.bank(seed, trial, s));
        Some(CompletedTask { record, bank_after })
    }

    fn trajectory(&self, seed: u64, trial: u32, task_id: &str) -> Option<Trajectory> {
        let bytes = self
            .store
            .get(self.run_id, &trajectory_path(seed, trial, task_id))
            .ok()?;
        Trajectory::from_jsonl(&String::from_utf8(bytes).ok()?).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> RunSpec {
        RunSpec {
            domain: "mini_airline".into(),
            config: RunConfig::default(),
            provider: ProviderKind::Scripted,
            fixtures: None,
        }
    }

    #[test]
    fn put_get_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let run = store.create_run(spec()).unwrap();
        store.put(&run.run_id, "a/b.json", b"{}").unwrap();
        assert_eq!(store.get(&run.run_id, "a/b.json").unwrap(), b"{}");
        store.put(&run.run_id, "a/b.json", b"{}").unwrap();
        assert_eq!(fs::read_dir(dir.path().join(&run.run_id).join("a")).unwrap().count(), 1);
        assert!(matches!(
            store.put(&run.run_id, "a/b.json", b"[]"),
            Err(StoreError::Integrity(_))
        ));
        assert!(matches!(store.get(&run.run_id, "../x"), Err(StoreError::NotFound(_))));
        assert!(matches!(store.get("missing", "a"), Err(StoreError::RunNotFound(_))));
    }

    #[test]
    fn status_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let run = store.create_run(spec()).unwrap();
        store
            .update_record(&run.run_id, |r| r.status = RunStatus::WaitingFeedback)
            .unwrap();
        store
            .update_record(&run.run_id, |r| r.status = RunStatus::Running)
            .unwrap();
        store
            .update_record(&run.run_id, |r| r.status = RunStatus::Done)
            .unwrap();
        assert!(store
            .update_record(&run.run_id, |r| r.status = RunStatus::Running)
            .is_err());
        let second = store.create_run(spec()).unwrap();
        assert_ne!(second.run_id, run.run_id);
        assert_eq!(store.list_runs().unwrap().len(), 2);
    }
}
