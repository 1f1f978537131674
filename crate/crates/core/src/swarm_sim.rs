//! Virtual-time simulation of a swarm of browser workers with Weibull dwell
//! churn. Worker slots are refilled as soon as a session leaves, so the
//! number of concurrently open sessions stays at `worker_slots`. A session's
//! dwell clock starts with its bundle request; the worker starts up once the
//! bundle has arrived.
//!
//! The server is a single FIFO queue; each handled message costs a fixed
//! service time plus a per-byte term. Links add latency and a transfer time
//! per message; messages of one session are serialized on its link. Kernels
//! run for real (unless disabled) while the clock advances by the modeled
//! compute time.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::warn;

use crate::bundle::BundleRegistry;
use crate::client_runtime::{Action, ClientState, ExecStep, TaskExecution};
use crate::domain::{DwellModel, ExperimentConfig, SessionId, TaskId, Transport};
use crate::error::SimError;
use crate::kernels::Problem;
use crate::manager::{Manager, ManagerConfig};
use crate::metrics::{self, CloseReason, EventKind, EventSink, MetricEvent, Summary};
use crate::protocol::{self, AckStatus, ClientMessage, ServerMessage};
use crate::task_source::{BenchmarkSource, ResultForwarder, TaskSource};

/// One dwell draw in seconds; `None` means the session never leaves.
pub fn sample_dwell<R: Rng + ?Sized>(model: &DwellModel, rng: &mut R) -> Option<f64> {
    match *model {
        DwellModel::Constant => None,
        DwellModel::Weibull { shape, scale } => {
            let u: f64 = rng.random();
            Some(scale * (-(1.0 - u).ln()).powf(1.0 / shape))
        }
    }
}

pub fn dwell_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn weibull_cdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        1.0 - (-(x / scale).powf(shape)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunOutcome {
    Drained,
    TimeCap { remaining: usize },
}

#[derive(Debug)]
pub struct RunOutput {
    pub outcome: RunOutcome,
    pub end_time: f64,
    pub events: Vec<MetricEvent>,
    pub source: BenchmarkSource,
}

impl RunOutput {
    pub fn summary(&self, cfg: &ExperimentConfig) -> Summary {
        metrics::experiment_summary(&self.events, Some(cfg))
    }

    /// Turns a capped run into an error.
    pub fn require_drained(self) -> Result<Self, SimError> {
        match self.outcome {
            RunOutcome::Drained => Ok(self),
            RunOutcome::TimeCap { remaining } => Err(SimError::TimeCapReached {
                at: self.end_time,
                remaining,
            }),
        }
    }
}

enum Req {
    Bundle,
    Message(Vec<u8>),
}

enum Reply {
    Bundle,
    Message(Vec<u8>),
}

enum Ev {
    Spawn { slot: u32 },
    Kill { s: usize },
    ClientStart { s: usize },
    Arrive { s: usize, req: Req },
    ServerDone { s: usize, reply: Reply, bytes: u64 },
    Deliver { s: usize, reply: Reply },
    ComputeDone { s: usize },
}

struct Scheduled {
    t: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    None,
    Tasks,
    Ack(TaskId),
    Idle,
    Computing,
    Booting,
}

struct SimSession {
    id: SessionId,
    slot: u32,
    alive: bool,
    client: ClientState,
    exec: Option<TaskExecution>,
    pending: Option<ExecStep>,
    block: Block,
    waiting: bool,
    uplink_free: f64,
    downlink_free: f64,
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
    manager: Manager,
    sink: Arc<EventSink>,
    source: BenchmarkSource,
    forwarder: ResultForwarder,
    sessions: Vec<SimSession>,
    server_queue: VecDeque<(usize, Req)>,
    server_busy: bool,
    rng: ChaCha8Rng,
    finished: bool,
}

/// Runs one experiment in virtual time.
pub fn run_virtual(cfg: &ExperimentConfig) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let problem = Problem::for_experiment(cfg)?;
    let mut source = BenchmarkSource::new(&problem, cfg.total_tasks)?;
    let sink = Arc::new(EventSink::in_memory());
    let mut manager = Manager::new(
        ManagerConfig {
            codec: cfg.codec,
            overhead: cfg.overhead,
        },
        sink.clone(),
        BundleRegistry::builtin(),
    );
    let tasks = source
        .pull_tasks(usize::MAX)
        .map_err(|e| SimError::Config(crate::error::ConfigError::Invalid(e.to_string())))?;
    manager.enqueue(tasks);

    let mut sim = Sim {
        cfg,
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        manager,
        sink,
        source,
        forwarder: ResultForwarder::default(),
        sessions: Vec::new(),
        server_queue: VecDeque::new(),
        server_busy: false,
        rng: dwell_rng(cfg.rng_seed),
        finished: false,
    };
    for slot in 0..cfg.worker_slots {
        sim.at(0.0, Ev::Spawn { slot });
    }
    let outcome = sim.run()?;
    Ok(RunOutput {
        outcome,
        end_time: sim.now,
        events: sim.sink.take(),
        source: sim.source,
    })
}

impl Sim<'_> {
    fn at(&mut self, t: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Scheduled { t, seq: self.seq, ev });
    }

    fn run(&mut self) -> Result<RunOutcome, SimError> {
        while let Some(Scheduled { t, ev, .. }) = self.heap.pop() {
            if t > self.cfg.time_cap {
                self.now = self.cfg.time_cap;
                return Ok(RunOutcome::TimeCap {
                    remaining: self.manager.queued_len(),
                });
            }
            self.now = t;
            self.dispatch(ev)?;
            if self.finished {
                self.manager.close_all(CloseReason::Drained, self.now);
                return Ok(RunOutcome::Drained);
            }
        }
        Ok(RunOutcome::TimeCap {
            remaining: self.manager.queued_len(),
        })
    }

    fn dispatch(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Spawn { slot } => self.spawn(slot),
            Ev::Kill { s } => {
                let sess = &mut self.sessions[s];
                sess.alive = false;
                let id = sess.id;
                self.manager.close_session(id, CloseReason::Dwell, self.now);
                let slot = self.sessions[s].slot;
                self.spawn(slot);
            }
            Ev::ClientStart { s } => {
                if self.sessions[s].alive {
                    if self.cfg.transport == Transport::Stream {
                        // connection upgrade round trip before the first frame
                        let sess = &mut self.sessions[s];
                        sess.uplink_free = sess.uplink_free.max(self.now + 2.0 * self.cfg.network.latency);
                    }
                    let hello = ClientMessage::Hello {
                        client_info: "simulated".into(),
                    };
                    self.send_message(s, &hello);
                }
            }
            Ev::Arrive { s, req } => {
                if self.sessions[s].alive {
                    self.server_queue.push_back((s, req));
                    if !self.server_busy {
                        self.serve_next();
                    }
                }
            }
            Ev::ServerDone { s, reply, bytes } => {
                self.server_busy = false;
                if self.sessions[s].alive {
                    let net = &self.cfg.network;
                    let sess = &mut self.sessions[s];
                    let depart = self.now.max(sess.downlink_free);
                    let tx = bytes as f64 / net.bandwidth;
                    sess.downlink_free = depart + tx;
                    let arrive = depart + tx + net.latency;
                    self.at(arrive, Ev::Deliver { s, reply });
                }
                self.serve_next();
            }
            Ev::Deliver { s, reply } => {
                if self.sessions[s].alive {
                    self.on_reply(s, reply)?;
                }
            }
            Ev::ComputeDone { s } => {
                if self.sessions[s].alive {
                    self.on_compute_done(s)?;
                }
            }
        }
        Ok(())
    }

    fn spawn(&mut self, slot: u32) {
        let id = self.manager.open_session(self.cfg.transport, self.now);
        let index = self.sessions.len();
        self.sessions.push(SimSession {
            id,
            slot,
            alive: true,
            client: ClientState::new(self.cfg.policy),
            exec: None,
            pending: None,
            block: Block::Booting,
            waiting: false,
            uplink_free: self.now,
            downlink_free: self.now,
        });
        if let Some(d) = sample_dwell(&self.cfg.dwell_model, &mut self.rng) {
            self.sink
                .record(MetricEvent::new(self.now, EventKind::DwellAssigned { seconds: d }).session(id));
            self.at(self.now + d, Ev::Kill { s: index });
        }
        let cost = self.cfg.overhead.request_response_per_exchange / 2;
        self.send_up(index, Req::Bundle, cost);
    }

    fn send_up(&mut self, s: usize, req: Req, bytes: u64) {
        let net = self.cfg.network;
        let sess = &mut self.sessions[s];
        let depart = self.now.max(sess.uplink_free);
        let tx = bytes as f64 / net.bandwidth;
        sess.uplink_free = depart + tx;
        self.at(depart + tx + net.latency, Ev::Arrive { s, req });
    }

    fn send_message(&mut self, s: usize, msg: &ClientMessage) {
        let body = protocol::encode(msg, &self.cfg.codec);
        let cost = protocol::wire_cost(body.len(), self.cfg.transport, &self.cfg.overhead);
        self.send_up(s, Req::Message(body), cost);
    }

    fn serve_next(&mut self) {
        if self.server_busy {
            return;
        }
        while let Some((s, req)) = self.server_queue.pop_front() {
            if !self.sessions[s].alive {
                continue;
            }
            let id = self.sessions[s].id;
            let (reply, in_bytes, out_bytes) = match req {
                Req::Bundle => {
                    let b = self.manager.serve_bundle(&self.cfg.kernel_id, Some(id), self.now);
                    let half = self.cfg.overhead.request_response_per_exchange / 2;
                    let len = b.map_or(0, |b| b.len() as u64);
                    (Reply::Bundle, half, len + half)
                }
                Req::Message(body) => {
                    let out = self.manager.handle(id, &body, self.now).body;
                    let framing = protocol::framing_cost(self.cfg.transport, &self.cfg.overhead);
                    let (i, o) = (body.len() as u64 + framing, out.len() as u64 + framing);
                    (Reply::Message(out), i, o)
                }
            };
            for (task, payload) in self.manager.take_outbox() {
                match self.forwarder.submit(&mut self.source, task, payload) {
                    Ok(crate::task_source::Delivery::Delivered) => self.manager.record_pushed(task, self.now),
                    Ok(_) => {}
                    Err(e) => warn!(error = %e, "result dropped"),
                }
            }
            if self.manager.drained() {
                self.finished = true;
            }
            let net = self.cfg.network;
            let service = net.service_time + net.service_per_byte * (in_bytes + out_bytes) as f64;
            self.server_busy = true;
            self.at(self.now + service, Ev::ServerDone { s, reply, bytes: out_bytes });
            return;
        }
    }

    fn begin_wait(&mut self, s: usize) {
        let sess = &mut self.sessions[s];
        if !sess.waiting {
            sess.waiting = true;
            let id = sess.id;
            self.sink.record(MetricEvent::new(self.now, EventKind::WaitStart).session(id));
        }
    }

    fn end_wait(&mut self, s: usize) {
        let sess = &mut self.sessions[s];
        if sess.waiting {
            sess.waiting = false;
            let id = sess.id;
            self.sink.record(MetricEvent::new(self.now, EventKind::WaitEnd).session(id));
        }
    }

    fn on_reply(&mut self, s: usize, reply: Reply) -> Result<(), SimError> {
        let body = match reply {
            Reply::Bundle => {
                self.at(self.now + self.cfg.network.client_init, Ev::ClientStart { s });
                return Ok(());
            }
            Reply::Message(b) => b,
        };
        let msg: ServerMessage = protocol::decode(&body)?;
        let sess = &mut self.sessions[s];
        match msg {
            ServerMessage::Welcome { .. } => {
                sess.block = Block::None;
            }
            ServerMessage::Tasks { tasks } => {
                sess.client.on_tasks(tasks);
                if matches!(sess.block, Block::Tasks | Block::Idle) {
                    sess.block = Block::None;
                }
            }
            ServerMessage::Drained => {
                sess.client.on_drained();
                if sess.block == Block::Tasks {
                    sess.block = Block::Idle;
                }
            }
            ServerMessage::Ack { task_id, status } => {
                if sess.block == Block::Ack(task_id) {
                    sess.block = Block::None;
                    if status == AckStatus::AlreadyComplete {
                        sess.exec = None;
                    }
                }
            }
            ServerMessage::Error { message } => {
                warn!(session = %sess.id, %message, "server rejected a message");
                if sess.block == Block::Tasks {
                    sess.client.on_request_failed();
                    sess.block = Block::None;
                }
            }
        }
        self.drive(s)
    }

    fn on_compute_done(&mut self, s: usize) -> Result<(), SimError> {
        let step = self.sessions[s].pending.take().expect("compute without a step");
        self.sessions[s].block = Block::None;
        match &step.message {
            ClientMessage::Partial { task_id, .. } => self.sessions[s].block = Block::Ack(*task_id),
            _ => self.sessions[s].exec = None,
        }
        self.send_message(s, &step.message);
        self.drive(s)
    }

    fn start_step(&mut self, s: usize) -> Result<bool, SimError> {
        let sess = &mut self.sessions[s];
        let Some(exec) = sess.exec.as_mut() else {
            return Ok(false);
        };
        match exec.step() {
            Ok(Some(step)) => {
                let dt = step.units as f64 * self.cfg.compute_scale;
                sess.pending = Some(step);
                sess.block = Block::Computing;
                self.at(self.now + dt, Ev::ComputeDone { s });
                Ok(true)
            }
            Ok(None) => {
                sess.exec = None;
                Ok(false)
            }
            Err(e) => {
                warn!(error = %e, "kernel failed, abandoning task");
                sess.exec = None;
                Ok(false)
            }
        }
    }

    fn drive(&mut self, s: usize) -> Result<(), SimError> {
        loop {
            if self.sessions[s].block != Block::None {
                return Ok(());
            }
            if self.sessions[s].exec.is_some() {
                if self.start_step(s)? {
                    return Ok(());
                }
                continue;
            }
            match self.sessions[s].client.next_action() {
                Action::RunTask(task) => {
                    self.end_wait(s);
                    match TaskExecution::start(task, &self.cfg.policy, self.cfg.execute_kernels) {
                        Ok(exec) => self.sessions[s].exec = Some(exec),
                        Err(e) => warn!(error = %e, "cannot start task"),
                    }
                }
                Action::Request(count) => {
                    self.begin_wait(s);
                    self.sessions[s].block = Block::Tasks;
                    self.send_message(s, &ClientMessage::RequestTasks { count });
                    return Ok(());
                }
                Action::RequestAsync(count) => {
                    self.send_message(s, &ClientMessage::RequestTasks { count });
                }
                Action::Idle => {
                    self.begin_wait(s);
                    self.sessions[s].block = Block::Idle;
                    return Ok(());
                }
            }
        }
    }
}
