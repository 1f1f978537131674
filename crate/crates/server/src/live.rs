//! Live swarm: simulated browsers that talk to a real server over HTTP or
//! WebSocket, with dwell-time churn on the wall clock.
//!
//! Each worker slot runs one session at a time: fetch the bundle, start up,
//! say hello, then request and run tasks under the configured policy until
//! its dwell time runs out. A departed session is reported to the manager
//! straight away, the way the virtual-time simulator does; a deployed
//! server learns of departures from stream disconnects or the idle reaper.
//! Clients send the header set of a current desktop browser so that the
//! measured transport overhead is representative.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use rand_chacha::ChaCha8Rng;
use reqwest::header::{HeaderMap, HeaderName, HeaderValue};
use tokio::sync::mpsc;
use tokio::task::{JoinHandle, JoinSet};
use tokio::time::{sleep, sleep_until, Instant};
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message;
use tracing::{debug, warn};
use volunteer_core::client_runtime::{Action, ClientState, ExecStep, TaskExecution};
use volunteer_core::domain::{ExperimentConfig, SessionId, TaskId, Transport};
use volunteer_core::kernels::Problem;
use volunteer_core::metrics::{CloseReason, EventKind, EventSink};
use volunteer_core::protocol::{self, AckStatus, ClientMessage, ServerMessage};
use volunteer_core::swarm_sim::{dwell_rng, sample_dwell, RunOutcome, RunOutput};
use volunteer_core::task_source::BenchmarkSource;

use crate::app::{AppState, SESSION_HEADER};
use crate::config::{ServerConfig, SourceConfig};
use crate::error::LiveError;
use crate::proxy::{CountingProxy, ProxyCounts};
use crate::upstream::SharedSource;

pub const BROWSER_USER_AGENT: &str = "Mozilla/5.0 (X11; Linux x86_64; rv:128.0) Gecko/20100101 Firefox/128.0";
const PAGE_ORIGIN: &str = "http://localhost:8000";

#[derive(Debug, Clone)]
pub struct LiveOptions {
    /// Route all client traffic through a byte-counting relay.
    pub proxy: bool,
    /// Send browser request headers.
    pub browser_headers: bool,
    /// How long a worker idles after a drained answer before asking again.
    pub drained_backoff: Duration,
    pub poll_interval: f64,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            proxy: false,
            browser_headers: true,
            drained_backoff: Duration::from_millis(250),
            poll_interval: 0.01,
        }
    }
}

#[derive(Debug)]
pub struct LiveOutput {
    pub run: RunOutput,
    /// Sessions ended by their dwell time.
    pub kills: u64,
    pub sessions_started: u64,
    pub proxy: Option<ProxyCounts>,
}

struct Ctx {
    cfg: ExperimentConfig,
    opts: LiveOptions,
    http_base: String,
    ws_url: String,
    state: Arc<AppState>,
    sink: Arc<EventSink>,
    rng: Mutex<ChaCha8Rng>,
    kills: AtomicU64,
    started: AtomicU64,
    stop: AtomicBool,
}

/// Serves the configured benchmark on an ephemeral port and runs the swarm
/// against it until every result has been delivered or `time_cap` wall
/// seconds pass.
pub async fn run_live(cfg: &ExperimentConfig, opts: &LiveOptions) -> Result<LiveOutput, LiveError> {
    cfg.validate()?;
    let problem = Problem::for_experiment(cfg)?;
    let source = SharedSource::new(BenchmarkSource::new(&problem, cfg.total_tasks)?);
    let sink = Arc::new(EventSink::in_memory());
    let server_cfg = ServerConfig {
        listen: "127.0.0.1:0".into(),
        poll_interval: opts.poll_interval,
        idle_timeout: 3600.0,
        low_watermark: usize::MAX,
        pull_batch: usize::MAX,
        codec: cfg.codec,
        overhead: cfg.overhead,
        source: SourceConfig::Benchmark(Box::new(cfg.clone())),
        ..ServerConfig::default()
    };
    let server = crate::start(server_cfg, Box::new(source.clone()), sink.clone()).await?;
    let proxy = if opts.proxy {
        Some(CountingProxy::start(server.addr()).await.map_err(crate::ServerError::Io)?)
    } else {
        None
    };
    let addr = proxy.as_ref().map_or(server.addr(), CountingProxy::addr);
    let report = drive_swarm(cfg, opts, server.state().clone(), addr, || source.with(|s| s.is_complete())).await;
    let end_time = sink.now();
    server.state().manager().close_all(CloseReason::Drained, end_time);
    let counts = proxy.as_ref().map(CountingProxy::counts);
    drop(proxy);
    server.shutdown().await?;
    let results = source.with(std::mem::take);
    Ok(LiveOutput {
        run: RunOutput {
            outcome: report.outcome,
            end_time,
            events: sink.take(),
            source: results,
        },
        kills: report.kills,
        sessions_started: report.sessions_started,
        proxy: counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwarmReport {
    pub outcome: RunOutcome,
    pub kills: u64,
    pub sessions_started: u64,
}

/// Runs worker slots against the server at `addr` until `done` returns true
/// or `time_cap` wall seconds pass. `state` is the server's own state; it
/// is used to report departures.
pub async fn drive_swarm(
    cfg: &ExperimentConfig,
    opts: &LiveOptions,
    state: Arc<AppState>,
    addr: SocketAddr,
    done: impl Fn() -> bool,
) -> SwarmReport {
    let sink = state.sink().clone();
    let ctx = Arc::new(Ctx {
        cfg: cfg.clone(),
        opts: opts.clone(),
        http_base: format!("http://{addr}"),
        ws_url: format!("ws://{addr}/ws"),
        state,
        sink,
        rng: Mutex::new(dwell_rng(cfg.rng_seed)),
        kills: AtomicU64::new(0),
        started: AtomicU64::new(0),
        stop: AtomicBool::new(false),
    });
    let mut swarm = JoinSet::new();
    for _ in 0..cfg.worker_slots {
        swarm.spawn(slot_loop(ctx.clone()));
    }
    let deadline = Instant::now() + Duration::from_secs_f64(cfg.time_cap);
    let outcome = loop {
        if done() {
            break RunOutcome::Drained;
        }
        if Instant::now() >= deadline {
            break RunOutcome::TimeCap {
                remaining: ctx.state.manager().queued_len(),
            };
        }
        sleep(Duration::from_millis(10)).await;
    };
    ctx.stop.store(true, Ordering::Relaxed);
    swarm.abort_all();
    while swarm.join_next().await.is_some() {}
    SwarmReport {
        outcome,
        kills: ctx.kills.load(Ordering::Relaxed),
        sessions_started: ctx.started.load(Ordering::Relaxed),
    }
}

async fn slot_loop(ctx: Arc<Ctx>) {
    while !ctx.stop.load(Ordering::Relaxed) {
        let dwell = {
            let mut rng = ctx.rng.lock().unwrap_or_else(|p| p.into_inner());
            sample_dwell(&ctx.cfg.dwell_model, &mut *rng)
        };
        ctx.started.fetch_add(1, Ordering::Relaxed);
        let id = Arc::new(AtomicU64::new(0));
        let session = run_session(ctx.clone(), id.clone(), dwell);
        let ended = match dwell {
            Some(d) => tokio::select! {
                r = session => Some(r),
                _ = sleep(Duration::from_secs_f64(d)) => None,
            },
            None => Some(session.await),
        };
        let sid = id.load(Ordering::Relaxed);
        if sid == 0 {
            if let Some(seconds) = dwell {
                ctx.sink.record_now(None, None, EventKind::DwellAssigned { seconds });
            }
        }
        match ended {
            None => {
                ctx.kills.fetch_add(1, Ordering::Relaxed);
                if sid != 0 {
                    ctx.state
                        .manager()
                        .close_session(SessionId(sid), CloseReason::Dwell, ctx.state.now());
                }
            }
            Some(Ok(())) => {}
            Some(Err(e)) => {
                debug!(error = %e, "session ended early");
                if sid != 0 {
                    ctx.state
                        .manager()
                        .close_session(SessionId(sid), CloseReason::Disconnect, ctx.state.now());
                }
                sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum SessionFailure {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("protocol: {0}")]
    Protocol(#[from] volunteer_core::error::ProtocolError),
    #[error("{0}")]
    Other(String),
}

pub fn browser_headers() -> HeaderMap {
    let mut h = HeaderMap::new();
    for (k, v) in [
        ("user-agent", BROWSER_USER_AGENT),
        ("accept", "*/*"),
        ("accept-language", "en-GB,en;q=0.5"),
        ("accept-encoding", "gzip, deflate, br, zstd"),
        ("origin", PAGE_ORIGIN),
        ("referer", "http://localhost:8000/"),
        ("sec-fetch-dest", "empty"),
        ("sec-fetch-mode", "cors"),
        ("sec-fetch-site", "cross-site"),
        ("priority", "u=4"),
        ("connection", "keep-alive"),
    ] {
        h.insert(HeaderName::from_static(k), HeaderValue::from_static(v));
    }
    h
}

fn websocket_headers() -> HeaderMap {
    let mut h = HeaderMap::new();
    for (k, v) in [
        ("user-agent", BROWSER_USER_AGENT),
        ("accept", "*/*"),
        ("accept-language", "en-GB,en;q=0.5"),
        ("accept-encoding", "gzip, deflate, br, zstd"),
        ("origin", PAGE_ORIGIN),
        ("sec-websocket-extensions", "permessage-deflate"),
        ("sec-fetch-dest", "empty"),
        ("sec-fetch-mode", "websocket"),
        ("sec-fetch-site", "cross-site"),
        ("pragma", "no-cache"),
        ("cache-control", "no-cache"),
    ] {
        h.insert(HeaderName::from_static(k), HeaderValue::from_static(v));
    }
    h
}

fn endpoint(msg: &ClientMessage) -> &'static str {
    match msg {
        ClientMessage::Hello { .. } => "/api/hello",
        ClientMessage::RequestTasks { .. } => "/api/tasks",
        ClientMessage::Partial { .. } => "/api/partial",
        ClientMessage::Final { .. } => "/api/final",
    }
}

async fn run_session(ctx: Arc<Ctx>, id: Arc<AtomicU64>, dwell: Option<f64>) -> Result<(), SessionFailure> {
    let mut builder = reqwest::Client::builder().pool_max_idle_per_host(1);
    if ctx.opts.browser_headers {
        builder = builder.default_headers(browser_headers());
    }
    let http = builder.build()?;
    let resp = http
        .get(format!("{}/bundle/{}", ctx.http_base, ctx.cfg.kernel_id))
        .send()
        .await?
        .error_for_status()?;
    resp.bytes().await?;
    sleep(Duration::from_secs_f64(ctx.cfg.network.client_init)).await;

    let hello = ClientMessage::Hello {
        client_info: BROWSER_USER_AGENT.into(),
    };
    let link = match ctx.cfg.transport {
        Transport::RequestResponse => Link::request_response(&ctx, http, &hello).await?,
        Transport::Stream => Link::stream(&ctx, &hello).await?,
    };
    id.store(link.session.0, Ordering::Relaxed);
    if let Some(seconds) = dwell {
        ctx.sink.record_now(Some(link.session), None, EventKind::DwellAssigned { seconds });
    }
    Worker::new(ctx, link).run().await
}

enum Incoming {
    Message(Vec<u8>),
    Gone(String),
}

struct Aborting(Vec<JoinHandle<()>>);

impl Drop for Aborting {
    fn drop(&mut self) {
        for h in &self.0 {
            h.abort();
        }
    }
}

/// One session's connection: outgoing messages go through `tx` in order,
/// replies arrive on `rx`.
struct Link {
    session: SessionId,
    tx: mpsc::UnboundedSender<ClientMessage>,
    rx: mpsc::UnboundedReceiver<Incoming>,
    _tasks: Aborting,
}

fn welcome(body: &[u8]) -> Result<SessionId, SessionFailure> {
    match protocol::decode::<ServerMessage>(body)? {
        ServerMessage::Welcome { session_id } => Ok(session_id),
        other => Err(SessionFailure::Other(format!("expected welcome, got {other:?}"))),
    }
}

impl Link {
    async fn request_response(ctx: &Ctx, http: reqwest::Client, hello: &ClientMessage) -> Result<Self, SessionFailure> {
        let codec = ctx.cfg.codec;
        let base = ctx.http_base.clone();
        let body = http
            .post(format!("{base}/api/hello"))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(protocol::encode(hello, &codec))
            .send()
            .await?
            .error_for_status()?
            .bytes()
            .await?;
        let session = welcome(&body)?;
        let (tx, mut out_rx) = mpsc::unbounded_channel::<ClientMessage>();
        let (in_tx, rx) = mpsc::unbounded_channel();
        let sender = tokio::spawn(async move {
            while let Some(msg) = out_rx.recv().await {
                let resp = http
                    .post(format!("{base}{}", endpoint(&msg)))
                    .header(reqwest::header::CONTENT_TYPE, "application/json")
                    .header(SESSION_HEADER, session.0.to_string())
                    .body(protocol::encode(&msg, &codec))
                    .send()
                    .await;
                let incoming = match resp {
                    Ok(r) if r.status() == reqwest::StatusCode::UNAUTHORIZED => Incoming::Gone("session expired".into()),
                    Ok(r) => match r.bytes().await {
                        Ok(b) => Incoming::Message(b.to_vec()),
                        Err(e) => Incoming::Gone(e.to_string()),
                    },
                    Err(e) => Incoming::Gone(e.to_string()),
                };
                let gone = matches!(incoming, Incoming::Gone(_));
                if in_tx.send(incoming).is_err() || gone {
                    break;
                }
            }
        });
        Ok(Self {
            session,
            tx,
            rx,
            _tasks: Aborting(vec![sender]),
        })
    }

    async fn stream(ctx: &Ctx, hello: &ClientMessage) -> Result<Self, SessionFailure> {
        let codec = ctx.cfg.codec;
        let mut request = ctx.ws_url.as_str().into_client_request()?;
        if ctx.opts.browser_headers {
            request.headers_mut().extend(websocket_headers());
        }
        let (ws, _) = tokio_tungstenite::connect_async(request).await?;
        let (mut write, mut read) = ws.split();
        write.send(frame(protocol::encode(hello, &codec))).await?;
        let session = loop {
            match read.next().await {
                Some(Ok(Message::Text(t))) => break welcome(t.as_bytes())?,
                Some(Ok(Message::Binary(b))) => break welcome(&b)?,
                Some(Ok(Message::Close(_))) | None => return Err(SessionFailure::Other("closed before welcome".into())),
                Some(Ok(_)) => continue,
                Some(Err(e)) => return Err(e.into()),
            }
        };
        let (tx, mut out_rx) = mpsc::unbounded_channel::<ClientMessage>();
        let (in_tx, rx) = mpsc::unbounded_channel();
        let writer = tokio::spawn(async move {
            while let Some(msg) = out_rx.recv().await {
                if write.send(frame(protocol::encode(&msg, &codec))).await.is_err() {
                    break;
                }
            }
        });
        let reader = tokio::spawn(async move {
            loop {
                let incoming = match read.next().await {
                    Some(Ok(Message::Text(t))) => Incoming::Message(t.as_bytes().to_vec()),
                    Some(Ok(Message::Binary(b))) => Incoming::Message(b.to_vec()),
                    Some(Ok(Message::Close(_))) | None => Incoming::Gone("stream closed".into()),
                    Some(Ok(_)) => continue,
                    Some(Err(e)) => Incoming::Gone(e.to_string()),
                };
                let gone = matches!(incoming, Incoming::Gone(_));
                if in_tx.send(incoming).is_err() || gone {
                    break;
                }
            }
        });
        Ok(Self {
            session,
            tx,
            rx,
            _tasks: Aborting(vec![writer, reader]),
        })
    }
}

fn frame(body: Vec<u8>) -> Message {
    match String::from_utf8(body) {
        Ok(s) => Message::text(s),
        Err(e) => Message::binary(e.into_bytes()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    None,
    Tasks,
    Ack(TaskId),
    Idle,
    Computing,
}

struct Worker {
    ctx: Arc<Ctx>,
    link: Link,
    client: ClientState,
    exec: Option<TaskExecution>,
    pending: Option<ExecStep>,
    block: Block,
    waiting: bool,
    compute_done: Option<Instant>,
    resume_at: Option<Instant>,
}

impl Worker {
    fn new(ctx: Arc<Ctx>, link: Link) -> Self {
        let policy = ctx.cfg.policy;
        Self {
            ctx,
            link,
            client: ClientState::new(policy),
            exec: None,
            pending: None,
            block: Block::None,
            waiting: false,
            compute_done: None,
            resume_at: None,
        }
    }

    async fn run(mut self) -> Result<(), SessionFailure> {
        loop {
            self.drive()?;
            let compute = self.compute_done;
            let resume = self.resume_at;
            tokio::select! {
                incoming = self.link.rx.recv() => match incoming {
                    Some(Incoming::Message(body)) => self.on_reply(&body)?,
                    Some(Incoming::Gone(why)) => return Err(SessionFailure::Other(why)),
                    None => return Err(SessionFailure::Other("link closed".into())),
                },
                _ = sleep_until(compute.unwrap_or_else(Instant::now)), if compute.is_some() => {
                    self.compute_done = None;
                    self.on_compute_done()?;
                }
                _ = sleep_until(resume.unwrap_or_else(Instant::now)), if resume.is_some() => {
                    self.resume_at = None;
                    self.client.resume();
                    if self.block == Block::Idle {
                        self.block = Block::None;
                    }
                }
            }
        }
    }

    fn send(&self, msg: ClientMessage) -> Result<(), SessionFailure> {
        self.link
            .tx
            .send(msg)
            .map_err(|_| SessionFailure::Other("link closed".into()))
    }

    fn begin_wait(&mut self) {
        if !self.waiting {
            self.waiting = true;
            self.ctx.sink.record_now(Some(self.link.session), None, EventKind::WaitStart);
        }
    }

    fn end_wait(&mut self) {
        if self.waiting {
            self.waiting = false;
            self.ctx.sink.record_now(Some(self.link.session), None, EventKind::WaitEnd);
        }
    }

    fn back_off(&mut self) {
        self.resume_at = Some(Instant::now() + self.ctx.opts.drained_backoff);
    }

    fn on_reply(&mut self, body: &[u8]) -> Result<(), SessionFailure> {
        match protocol::decode::<ServerMessage>(body)? {
            ServerMessage::Welcome { .. } => {}
            ServerMessage::Tasks { tasks } => {
                self.client.on_tasks(tasks);
                if matches!(self.block, Block::Tasks | Block::Idle) {
                    self.block = Block::None;
                }
            }
            ServerMessage::Drained => {
                self.client.on_drained();
                if self.block == Block::Tasks {
                    self.block = Block::Idle;
                }
                self.back_off();
            }
            ServerMessage::Ack { task_id, status } => {
                if self.block == Block::Ack(task_id) {
                    self.block = Block::None;
                    if status == AckStatus::AlreadyComplete {
                        self.exec = None;
                    }
                }
            }
            ServerMessage::Error { message } => {
                warn!(session = %self.link.session, %message, "server rejected a message");
                match self.block {
                    Block::Tasks => {
                        self.client.on_drained();
                        self.block = Block::Idle;
                        self.back_off();
                    }
                    Block::Ack(_) => {
                        self.exec = None;
                        self.block = Block::None;
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn on_compute_done(&mut self) -> Result<(), SessionFailure> {
        let step = self.pending.take().expect("compute without a step");
        self.block = Block::None;
        match &step.message {
            ClientMessage::Partial { task_id, .. } => self.block = Block::Ack(*task_id),
            _ => self.exec = None,
        }
        self.send(step.message)
    }

    fn start_step(&mut self) -> bool {
        let Some(exec) = self.exec.as_mut() else {
            return false;
        };
        match exec.step() {
            Ok(Some(step)) => {
                let dt = step.units as f64 * self.ctx.cfg.compute_scale;
                self.pending = Some(step);
                self.block = Block::Computing;
                self.compute_done = Some(Instant::now() + Duration::from_secs_f64(dt));
                true
            }
            Ok(None) => {
                self.exec = None;
                false
            }
            Err(e) => {
                warn!(error = %e, "kernel failed, abandoning task");
                self.exec = None;
                false
            }
        }
    }

    fn drive(&mut self) -> Result<(), SessionFailure> {
        loop {
            if self.block != Block::None {
                return Ok(());
            }
            if self.exec.is_some() {
                if self.start_step() {
                    return Ok(());
                }
                continue;
            }
            match self.client.next_action() {
                Action::RunTask(task) => {
                    self.end_wait();
                    match TaskExecution::start(task, &self.ctx.cfg.policy, self.ctx.cfg.execute_kernels) {
                        Ok(exec) => self.exec = Some(exec),
                        Err(e) => warn!(error = %e, "cannot start task"),
                    }
                }
                Action::Request(count) => {
                    self.begin_wait();
                    self.block = Block::Tasks;
                    return self.send(ClientMessage::RequestTasks { count });
                }
                Action::RequestAsync(count) => {
                    self.send(ClientMessage::RequestTasks { count })?;
                }
                Action::Idle => {
                    self.begin_wait();
                    self.block = Block::Idle;
                    return Ok(());
                }
            }
        }
    }
}
