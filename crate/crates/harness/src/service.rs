//! HTTP/JSON service over the run store, including the blocking
//! human-feedback workflow.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use policybank::bank::{diff_snapshots, BankSnapshot};
use policybank::evaluation::{CompletedTask, StreamSink, TaskRecord};
use policybank::reviewer::InitOutcome;
use policybank::runtime::{FeedbackRequest, HumanFeedback, ReviewRecord};
use policybank::{Feedback, FeedbackSource, Trajectory};
use serde::{Deserialize, Serialize};

use crate::driver::resolve_domain;
use crate::store::{
    bank_path, feedback_path, record_path, trajectory_path, RunRecord, RunSink, RunSpec, RunStatus, Store, StoreError,
    REPORT_JSON,
};

const DEFAULT_POLL_MS: u64 = 25_000;

#[derive(Default)]
struct Slot {
    waiting: Option<FeedbackRequest>,
    answer: Option<Feedback>,
}

#[derive(Default)]
struct FeedbackSlot {
    state: Mutex<Slot>,
    ready: Condvar,
}

/// Shared service state.
pub struct AppState {
    pub store: Arc<Store>,
    slots: Mutex<HashMap<String, Arc<FeedbackSlot>>>,
    versions: Mutex<HashMap<String, u64>>,
    active: Mutex<HashSet<String>>,
    changed: tokio::sync::Notify,
}

impl AppState {
    pub fn new(store: Arc<Store>) -> Arc<AppState> {
        Arc::new(AppState {
            store,
            slots: Mutex::default(),
            versions: Mutex::default(),
            active: Mutex::default(),
            changed: tokio::sync::Notify::new(),
        })
    }

    fn slot(&self, run_id: &str) -> Arc<FeedbackSlot> {
        self.slots
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(run_id.to_string())
            .or_default()
            .clone()
    }

    fn version(&self, run_id: &str) -> u64 {
        *self
            .versions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(run_id)
            .unwrap_or(&0)
    }

    fn bump(&self, run_id: &str) {
        *self
            .versions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(run_id.to_string())
            .or_default() += 1;
        self.changed.notify_waiters();
    }

    /// Starts the driver thread for a run unless one is already running.
    pub fn spawn_driver(self: &Arc<Self>, run_id: String) {
        if !self
            .active
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(run_id.clone())
        {
            return;
        }
        let state = self.clone();
        std::thread::spawn(move || {
            let channel = ServiceFeedback {
                state: state.clone(),
                run_id: run_id.clone(),
            };
            let sink = NotifyingSink {
                inner: state.store.sink(&run_id),
                state: &state,
                run_id: &run_id,
            };
            if let Err(e) = crate::driver::execute_run_with_sink(&state.store, &run_id, &sink, Some(&channel)) {
                tracing::warn!(run = %run_id, error = %format!("{e:#}"), "run failed");
            }
            state.active.lock().unwrap_or_else(|p| p.into_inner()).remove(&run_id);
            state.bump(&run_id);
        });
    }

    /// Restarts every run left running or waiting by a previous process.
    pub fn resume_active_runs(self: &Arc<Self>) -> Result<usize, StoreError> {
        let mut n = 0;
        for record in self.store.list_runs()? {
            if record.status.is_active() {
                self.spawn_driver(record.run_id);
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Wraps the store sink so clients see progress events.
struct NotifyingSink<'a> {
    inner: RunSink<'a>,
    state: &'a AppState,
    run_id: &'a str,
}

impl StreamSink for NotifyingSink<'_> {
    fn initial_bank(&self) -> Option<BankSnapshot> {
        self.inner.initial_bank()
    }
    fn put_initial_bank(&self, init: &InitOutcome) -> Result<(), String> {
        self.inner.put_initial_bank(init)?;
        self.state.bump(self.run_id);
        Ok(())
    }
    fn put_trajectory(&self, seed: u64, trial: u32, traj: &Trajectory) -> Result<(), String> {
        self.inner.put_trajectory(seed, trial, traj)
    }
    fn put_review(&self, seed: u64, trial: u32, review: &ReviewRecord, snapshot: &BankSnapshot) -> Result<(), String> {
        self.inner.put_review(seed, trial, review, snapshot)?;
        self.state.bump(self.run_id);
        Ok(())
    }
    fn put_task_record(&self, seed: u64, trial: u32, record: &TaskRecord) -> Result<(), String> {
        self.inner.put_task_record(seed, trial, record)?;
        self.state.bump(self.run_id);
        Ok(())
    }
    fn completed(&self, seed: u64, trial: u32, task_id: &str) -> Option<CompletedTask> {
        self.inner.completed(seed, trial, task_id)
    }
    fn trajectory(&self, seed: u64, trial: u32, task_id: &str) -> Option<Trajectory> {
        self.inner.trajectory(seed, trial, task_id)
    }
}

/// Feedback as posted by a reviewer and persisted per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostedFeedback {
    pub task_id: String,
    pub trial: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    pub reward: bool,
    #[serde(default)]
    pub explanation: Option<String>,
}

impl PostedFeedback {
    fn into_feedback(self) -> Feedback {
        Feedback {
            reward: self.reward,
            explanation: self.explanation.filter(|e| !e.trim().is_empty()),
            oracle_clarification: None,
            source: FeedbackSource::Human,
        }
    }
}

struct ServiceFeedback {
    state: Arc<AppState>,
    run_id: String,
}

impl HumanFeedback for ServiceFeedback {
    fn request(&self, request: FeedbackRequest) -> Result<Feedback, String> {
        let store = &self.state.store;
        let path = feedback_path(request.seed, request.trial, &request.task_id);
        if let Ok(posted) = store.get_json::<PostedFeedback>(&self.run_id, &path) {
            return Ok(posted.into_feedback());
        }
        let slot = self.state.slot(&self.run_id);
        let mut guard = slot.state.lock().unwrap_or_else(|p| p.into_inner());
        guard.waiting = Some(request.clone());
        guard.answer = None;
        store
            .update_record(&self.run_id, |r| {
                r.status = RunStatus::WaitingFeedback;
                r.pending = Some(request.clone());
            })
            .map_err(|e| e.to_string())?;
        self.state.bump(&self.run_id);
        let feedback = loop {
            if let Some(answer) = guard.answer.take() {
                break answer;
            }
            guard = slot.ready.wait(guard).unwrap_or_else(|p| p.into_inner());
        };
        guard.waiting = None;
        drop(guard);
        store
            .update_record(&self.run_id, |r| {
                r.status = RunStatus::Running;
                r.pending = None;
            })
            .map_err(|e| e.to_string())?;
        self.state.bump(&self.run_id);
        Ok(feedback)
    }
}

/// API error with its status code.
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::RunNotFound(_) | StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Integrity(_) | StoreError::Transition { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bytes_response(bytes: Vec<u8>, content_type: &'static str) -> Response {
    Response::builder()
        .header(header::CONTENT_TYPE, content_type)
        .body(Body::from(bytes))
        .expect("static headers are valid")
}

#[derive(Debug, Deserialize)]
pub struct StreamQuery {
    seed: Option<u64>,
    trial: Option<u32>,
}

fn stream_of(record: &RunRecord, q: &StreamQuery) -> (u64, u32) {
    let seed = q
        .seed
        .or_else(|| record.spec.config.seeds.first().copied())
        .unwrap_or(0);
    (seed, q.trial.unwrap_or(1))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(start_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/trajectories/{task}/{trial}", get(get_trajectory))
        .route("/runs/{id}/records/{task}/{trial}", get(get_task_record))
        .route("/runs/{id}/bank/{step}", get(get_bank))
        .route("/runs/{id}/bank-diff/{step}", get(get_bank_diff))
        .route("/runs/{id}/report", get(get_report))
        .route("/runs/{id}/feedback", post(post_feedback))
        .route("/runs/{id}/events", get(get_events))
        .with_state(state)
}

async fn list_runs(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<RunRecord>>> {
    Ok(Json(state.store.list_runs()?))
}

#[derive(Serialize)]
struct RunView {
    #[serde(flatten)]
    record: RunRecord,
    artifacts: crate::store::ArtifactIndex,
}

async fn get_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<RunView>> {
    let record = state.store.record(&id)?;
    let artifacts = state.store.index(&id)?;
    Ok(Json(RunView { record, artifacts }))
}

async fn start_run(
    State(state): State<Arc<AppState>>,
    Json(spec): Json<RunSpec>,
) -> ApiResult<(StatusCode, Json<RunRecord>)> {
    spec.config
        .validate(true)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    resolve_domain(&spec.domain).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("{e:#}")))?;
    let record = state.store.create_run(spec)?;
    state.spawn_driver(record.run_id.clone());
    Ok((StatusCode::CREATED, Json(record)))
}

async fn get_trajectory(
    State(state): State<Arc<AppState>>,
    Path((id, task, trial)): Path<(String, String, u32)>,
    Query(q): Query<StreamQuery>,
) -> ApiResult<Response> {
    let record = state.store.record(&id)?;
    let (seed, _) = stream_of(&record, &q);
    let bytes = state.store.get(&id, &trajectory_path(seed, trial, &task))?;
    Ok(bytes_response(bytes, "application/x-ndjson"))
}

async fn get_task_record(
    State(state): State<Arc<AppState>>,
    Path((id, task, trial)): Path<(String, String, u32)>,
    Query(q): Query<StreamQuery>,
) -> ApiResult<Response> {
    let record = state.store.record(&id)?;
    let (seed, _) = stream_of(&record, &q);
    let bytes = state.store.get(&id, &record_path(seed, trial, &task))?;
    Ok(bytes_response(bytes, "application/json"))
}

async fn get_bank(
    State(state): State<Arc<AppState>>,
    Path((id, step)): Path<(String, u32)>,
    Query(q): Query<StreamQuery>,
) -> ApiResult<Response> {
    let record = state.store.record(&id)?;
    let (seed, trial) = stream_of(&record, &q);
    let bytes = state.store.get(&id, &bank_path(seed, trial, step))?;
    Ok(bytes_response(bytes, "application/json"))
}

fn load_bank(store: &Store, id: &str, seed: u64, trial: u32, step: u32) -> ApiResult<BankSnapshot> {
    let bytes = store.get(id, &bank_path(seed, trial, step))?;
    BankSnapshot::from_file_bytes(&bytes).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn get_bank_diff(
    State(state): State<Arc<AppState>>,
    Path((id, step)): Path<(String, u32)>,
    Query(q): Query<StreamQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let record = state.store.record(&id)?;
    let (seed, trial) = stream_of(&record, &q);
    let after = load_bank(&state.store, &id, seed, trial, step)?;
    let before = match step {
        0 => BankSnapshot::default(),
        s => load_bank(&state.store, &id, seed, trial, s - 1)?,
    };
    let diff = diff_snapshots(&before, &after);
    Ok(Json(serde_json::to_value(diff).expect("diffs serialize")))
}

async fn get_report(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = state.store.get(&id, REPORT_JSON)?;
    Ok(bytes_response(bytes, "application/json"))
}

async fn post_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(posted): Json<PostedFeedback>,
) -> ApiResult<Json<serde_json::Value>> {
    state.store.record(&id)?;
    let slot = state.slot(&id);
    let mut guard = slot.state.lock().unwrap_or_else(|p| p.into_inner());
    let pending = guard
        .waiting
        .clone()
        .filter(|w| w.task_id == posted.task_id && w.trial == posted.trial && posted.seed.is_none_or(|s| s == w.seed))
        .filter(|_| guard.answer.is_none())
        .ok_or_else(|| {
            ApiError(
                StatusCode::CONFLICT,
                format!(
                    "task {} trial {} is not awaiting feedback",
                    posted.task_id, posted.trial
                ),
            )
        })?;
    let persisted = PostedFeedback {
        seed: Some(pending.seed),
        ..posted
    };
    let mut bytes = serde_json::to_vec_pretty(&persisted).expect("feedback serializes");
    bytes.push(b'\n');
    state.store.put(
        &id,
        &feedback_path(pending.seed, pending.trial, &pending.task_id),
        &bytes,
    )?;
    guard.answer = Some(persisted.into_feedback());
    slot.ready.notify_all();
    Ok(Json(
        serde_json::json!({ "accepted": true, "task_id": pending.task_id, "trial": pending.trial }),
    ))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    since: Option<u64>,
    timeout_ms: Option<u64>,
}

#[derive(Debug, Serialize)]
struct EventView {
    run_id: String,
    version: u64,
    status: RunStatus,
    pending: Option<FeedbackRequest>,
}

/// Long poll: answers once the run's version exceeds `since`, or at the
/// timeout with the current state.
async fn get_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    state.store.record(&id)?;
    let since = q.since.unwrap_or(0);
    let deadline = tokio::time::Instant::now() + Duration::from_millis(q.timeout_ms.unwrap_or(DEFAULT_POLL_MS));
    loop {
        let notified = state.changed.notified();
        if state.version(&id) > since || tokio::time::Instant::now() >= deadline {
            break;
        }
        if tokio::time::timeout_at(deadline, notified).await.is_err() {
            break;
        }
    }
    let record = state.store.record(&id)?;
    let view = EventView {
        run_id: id.clone(),
        version: state.version(&id),
        status: record.status,
        pending: record.pending,
    };
    Ok(Json(serde_json::to_value(view).expect("events serialize")))
}

/// Binds and serves until the process ends.
pub async fn serve(store: Arc<Store>, host: &str, port: u16) -> anyhow::Result<()> {
    let state = AppState::new(store);
    let resumed = state.resume_active_runs()?;
    if resumed > 0 {
        tracing::info!(resumed, "resumed interrupted runs");
    }
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
