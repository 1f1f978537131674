//! The task source side: an HTTP client for remote sources, an HTTP front
//! for in-process sources, and the loop that moves tasks and results
//! between a source and the manager.
//!
//! Remote wire format: `GET {endpoint}/tasks?max=N` answers
//! `{"tasks": [{"task_id", "kernel_id", "payload"}]}`, and accepted results
//! go to `POST {endpoint}/results` as `{"task_id", "payload"}`. A configured
//! token is sent as a bearer credential.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};
use volunteer_core::domain::{Payload, Task, TaskId};
use volunteer_core::error::SourceError;
use volunteer_core::task_source::{Delivery, ResultForwarder, TaskSource, TaskSourceDescriptor};

use crate::app::AppState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamTask {
    pub task_id: TaskId,
    pub kernel_id: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub tasks: Vec<UpstreamTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultUpload {
    pub task_id: TaskId,
    pub payload: Payload,
}

/// Blocking client; keep it off async executor threads.
#[derive(Debug)]
pub struct HttpTaskSource {
    endpoint: String,
    token: Option<String>,
    timeout: Duration,
    client: Option<reqwest::blocking::Client>,
}

impl HttpTaskSource {
    pub fn new(descriptor: &TaskSourceDescriptor) -> Self {
        Self {
            endpoint: descriptor.endpoint.trim_end_matches('/').to_string(),
            token: descriptor.token.clone(),
            timeout: Duration::from_secs(10),
            client: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    // built lazily so that construction may happen inside a runtime
    fn client(&mut self) -> Result<&reqwest::blocking::Client, SourceError> {
        if self.client.is_none() {
            let c = reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .map_err(unavailable)?;
            self.client = Some(c);
        }
        Ok(self.client.as_ref().expect("client was just built"))
    }

    fn authorize(&self, req: reqwest::blocking::RequestBuilder) -> reqwest::blocking::RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }
}

fn unavailable(e: impl std::fmt::Display) -> SourceError {
    SourceError::Unavailable(e.to_string())
}

impl TaskSource for HttpTaskSource {
    fn pull_tasks(&mut self, max: usize) -> Result<Vec<Task>, SourceError> {
        let url = format!("{}/tasks?max={max}", self.endpoint);
        let req = self.client()?.get(&url);
        let resp = self.authorize(req).send().map_err(unavailable)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(SourceError::Unavailable(format!("GET {url}: {status}")));
        }
        let batch: TaskBatch = resp.json().map_err(unavailable)?;
        Ok(batch
            .tasks
            .into_iter()
            .map(|t| Task::new(t.task_id, t.kernel_id, t.payload))
            .collect())
    }

    fn push_result(&mut self, task_id: TaskId, payload: &Payload) -> Result<(), SourceError> {
        let url = format!("{}/results", self.endpoint);
        let body = ResultUpload {
            task_id,
            payload: payload.clone(),
        };
        let req = self.client()?.post(&url).json(&body);
        let resp = self.authorize(req).send().map_err(unavailable)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(SourceError::Unavailable(format!("POST {url}: {status}")));
        }
        Ok(())
    }
}

/// A source shared between the source loop and whoever owns the results.
#[derive(Debug, Default)]
pub struct SharedSource<T>(Arc<Mutex<T>>);

impl<T> Clone for SharedSource<T> {
    fn clone(&self) -> Self {
        Self(self.0.clone())
    }
}

impl<T> SharedSource<T> {
    pub fn new(inner: T) -> Self {
        Self(Arc::new(Mutex::new(inner)))
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut T) -> R) -> R {
        let mut g = self.0.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut g)
    }
}

impl<T: TaskSource> TaskSource for SharedSource<T> {
    fn pull_tasks(&mut self, max: usize) -> Result<Vec<Task>, SourceError> {
        self.with(|s| s.pull_tasks(max))
    }

    fn push_result(&mut self, task_id: TaskId, payload: &Payload) -> Result<(), SourceError> {
        self.with(|s| s.push_result(task_id, payload))
    }
}

struct FrontState<T> {
    source: SharedSource<T>,
    token: Option<String>,
}

#[derive(Deserialize)]
struct MaxQuery {
    max: Option<usize>,
}

/// Serves any in-process source over the remote wire format.
pub fn source_router<T: TaskSource + 'static>(source: SharedSource<T>, token: Option<String>) -> Router {
    let st = Arc::new(FrontState { source, token });
    Router::new()
        .route("/tasks", get(front_tasks::<T>))
        .route("/results", post(front_results::<T>))
        .with_state(st)
}

fn authorized<T>(st: &FrontState<T>, headers: &HeaderMap) -> bool {
    let Some(token) = &st.token else { return true };
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|v| v == token)
}

async fn front_tasks<T: TaskSource + 'static>(
    State(st): State<Arc<FrontState<T>>>,
    headers: HeaderMap,
    Query(q): Query<MaxQuery>,
) -> Response {
    if !authorized(&st, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    match st.source.with(|s| s.pull_tasks(q.max.unwrap_or(100))) {
        Ok(tasks) => Json(TaskBatch {
            tasks: tasks
                .into_iter()
                .map(|t| UpstreamTask {
                    task_id: t.task_id,
                    kernel_id: t.kernel_id,
                    payload: t.payload,
                })
                .collect(),
        })
        .into_response(),
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
    }
}

async fn front_results<T: TaskSource + 'static>(
    State(st): State<Arc<FrontState<T>>>,
    headers: HeaderMap,
    Json(r): Json<ResultUpload>,
) -> Response {
    if !authorized(&st, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    match st.source.with(|s| s.push_result(r.task_id, &r.payload)) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
    }
}

/// Moves work between a source and the manager: pushes accepted results,
/// retries buffered ones, tops up the queue and reaps idle sessions.
pub struct SourceLoop {
    state: Arc<AppState>,
    source: Box<dyn TaskSource>,
    forwarder: ResultForwarder,
}

impl SourceLoop {
    pub fn new(state: Arc<AppState>, source: Box<dyn TaskSource>) -> Self {
        let cfg = state.config();
        let forwarder = ResultForwarder::new(cfg.forward_attempts, cfg.forward_capacity);
        Self {
            state,
            source,
            forwarder,
        }
    }

    /// One round. Returns the number of tasks pulled.
    pub fn tick(&mut self) -> usize {
        let outbox = self.state.manager().take_outbox();
        for (task, payload) in outbox {
            match self.forwarder.submit(&mut self.source, task, payload) {
                Ok(Delivery::Delivered) => self.state.manager().record_pushed(task, self.state.now()),
                Ok(Delivery::Buffered) => {}
                Err(e) => warn!(error = %e, "result dropped"),
            }
        }
        if self.forwarder.pending() > 0 {
            let report = self.forwarder.retry(&mut self.source);
            for task in report.delivered {
                self.state.manager().record_pushed(task, self.state.now());
            }
            for e in report.exhausted {
                warn!(error = %e, "result dropped");
            }
        }
        let cfg = self.state.config();
        let mut pulled = 0;
        if self.state.manager().queued_len() < cfg.low_watermark {
            match self.source.pull_tasks(cfg.pull_batch) {
                Ok(tasks) => {
                    pulled = tasks.len();
                    if pulled > 0 {
                        let added = self.state.manager().enqueue(tasks);
                        info!(pulled, added, "tasks pulled from source");
                    }
                }
                Err(e) => warn!(error = %e, "task source pull failed"),
            }
        }
        let reaped = self.state.manager().reap_idle(self.state.now(), cfg.idle_timeout);
        if !reaped.is_empty() {
            info!(count = reaped.len(), "idle sessions closed");
        }
        pulled
    }

    pub fn pending_results(&self) -> usize {
        self.forwarder.pending()
    }

    /// Runs on a dedicated thread until `stop` is set, then makes one last
    /// round so accepted results are not left behind.
    pub fn spawn(mut self, stop: Arc<AtomicBool>) -> JoinHandle<Self> {
        std::thread::Builder::new()
            .name("task-source".into())
            .spawn(move || {
                let interval = Duration::from_secs_f64(self.state.config().poll_interval);
                while !stop.load(Ordering::Relaxed) {
                    let started = Instant::now();
                    self.tick();
                    while started.elapsed() < interval && !stop.load(Ordering::Relaxed) {
                        std::thread::sleep(Duration::from_millis(5).min(interval));
                    }
                }
                self.tick();
                self
            })
            .expect("spawning the source thread")
    }
}
