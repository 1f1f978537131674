//! The task manager proper: queue, sessions and the message handler. It is
//! transport agnostic; callers pass raw bodies in and get raw bodies back,
//! along with the current time on whatever clock they run.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::bundle::{Bundle, BundleRegistry};
use crate::domain::{CheckpointRecord, Payload, SessionId, Task, TaskId, Transport};
use crate::error::QueueError;
use crate::metrics::{CloseReason, Direction, EventKind, EventSink, MetricEvent};
use crate::protocol::{
    self, AckStatus, ClientMessage, CodecConfig, OverheadConfig, ServerMessage, TaskSnapshot,
};
use crate::task_queue::{Completion, TaskQueue};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerConfig {
    pub codec: CodecConfig,
    pub overhead: OverheadConfig,
}

#[derive(Debug, Clone)]
struct OpenSession {
    transport: Transport,
    last_seen: f64,
    tasks_completed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Well-formed but refused, e.g. a result for an unknown task.
    Rejected,
    Malformed,
    UnknownSession,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handled {
    pub body: Vec<u8>,
    pub outcome: Outcome,
}

/// Counters served by the admin endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManagerStats {
    pub queued: usize,
    pub completed: usize,
    pub open_sessions: usize,
    pub value_sessions: u64,
    pub non_value_sessions: u64,
    pub cumulative_downtime: f64,
    pub bytes_request_response: u64,
    pub bytes_stream: u64,
    pub messages: u64,
    pub rejected: u64,
    pub duplicate_finals: u64,
    pub results_awaiting_push: usize,
}

pub struct Manager {
    cfg: ManagerConfig,
    queue: TaskQueue,
    sessions: HashMap<SessionId, OpenSession>,
    next_session: u64,
    sink: Arc<EventSink>,
    bundles: BundleRegistry,
    outbox: Vec<(TaskId, Payload)>,
    value_sessions: u64,
    non_value_sessions: u64,
    bytes: [u64; 2],
    messages: u64,
    rejected: u64,
    duplicate_finals: u64,
}

impl std::fmt::Debug for Manager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Manager")
            .field("queued", &self.queue.queued_len())
            .field("completed", &self.queue.completed_len())
            .field("sessions", &self.sessions.len())
            .finish()
    }
}

fn transport_index(t: Transport) -> usize {
    match t {
        Transport::RequestResponse => 0,
        Transport::Stream => 1,
    }
}

impl Manager {
    pub fn new(cfg: ManagerConfig, sink: Arc<EventSink>, bundles: BundleRegistry) -> Self {
        Self {
            cfg,
            queue: TaskQueue::new(),
            sessions: HashMap::new(),
            next_session: 1,
            sink,
            bundles,
            outbox: Vec::new(),
            value_sessions: 0,
            non_value_sessions: 0,
            bytes: [0; 2],
            messages: 0,
            rejected: 0,
            duplicate_finals: 0,
        }
    }

    pub fn sink(&self) -> &Arc<EventSink> {
        &self.sink
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.cfg
    }

    fn emit(&self, t: f64, session: Option<SessionId>, task: Option<TaskId>, kind: EventKind) {
        self.sink.record(MetricEvent { t, session, task, kind });
    }

    /// Adds tasks from the source; ids already known are skipped.
    pub fn enqueue(&mut self, tasks: Vec<Task>) -> usize {
        let mut added = 0;
        for t in tasks {
            match self.queue.enqueue(t) {
                Ok(()) => added += 1,
                Err(e) => warn!(error = %e, "task from source ignored"),
            }
        }
        added
    }

    pub fn queued_len(&self) -> usize {
        self.queue.queued_len()
    }

    pub fn completed_len(&self) -> usize {
        self.queue.completed_len()
    }

    pub fn drained(&self) -> bool {
        self.queue.drained()
    }

    pub fn queue(&self) -> &TaskQueue {
        &self.queue
    }

    pub fn open_session(&mut self, transport: Transport, now: f64) -> SessionId {
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(
            id,
            OpenSession {
                transport,
                last_seen: now,
                tasks_completed: 0,
            },
        );
        self.emit(now, Some(id), None, EventKind::SessionOpen { transport });
        if transport == Transport::Stream {
            let half = self.cfg.overhead.stream_handshake / 2;
            for (direction, count) in [
                (Direction::Inbound, half),
                (Direction::Outbound, self.cfg.overhead.stream_handshake - half),
            ] {
                self.bytes[1] += count;
                self.emit(now, Some(id), None, EventKind::Bytes { transport, direction, count });
            }
        }
        id
    }

    pub fn is_open(&self, session: SessionId) -> bool {
        self.sessions.contains_key(&session)
    }

    pub fn open_sessions(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.sessions.keys().copied()
    }

    /// Returns false if the session was not open.
    pub fn close_session(&mut self, session: SessionId, reason: CloseReason, now: f64) -> bool {
        let Some(s) = self.sessions.remove(&session) else {
            return false;
        };
        if s.tasks_completed > 0 {
            self.value_sessions += 1;
        } else {
            self.non_value_sessions += 1;
        }
        self.emit(now, Some(session), None, EventKind::SessionClose { reason });
        true
    }

    pub fn close_all(&mut self, reason: CloseReason, now: f64) {
        let mut open: Vec<SessionId> = self.sessions.keys().copied().collect();
        open.sort();
        for id in open {
            self.close_session(id, reason, now);
        }
    }

    /// Closes request-response sessions not heard from for `timeout` seconds.
    pub fn reap_idle(&mut self, now: f64, timeout: f64) -> Vec<SessionId> {
        let mut stale: Vec<SessionId> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.transport == Transport::RequestResponse && now - s.last_seen > timeout)
            .map(|(id, _)| *id)
            .collect();
        stale.sort();
        for id in &stale {
            self.close_session(*id, CloseReason::IdleTimeout, now);
        }
        stale
    }

    pub fn bundle(&self, kernel_id: &str) -> Option<Arc<Bundle>> {
        self.bundles.get(kernel_id)
    }

    /// Looks up a bundle and accounts for serving it.
    pub fn serve_bundle(&mut self, kernel_id: &str, session: Option<SessionId>, now: f64) -> Option<Arc<Bundle>> {
        let b = self.bundles.get(kernel_id)?;
        let bytes = b.len() as u64 + self.cfg.overhead.request_response_per_exchange;
        self.bytes[0] += bytes;
        if let Some(s) = session.and_then(|s| self.sessions.get_mut(&s)) {
            s.last_seen = now;
        }
        self.emit(now, session, None, EventKind::BundleServed { kernel_id: kernel_id.to_string(), bytes });
        Some(b)
    }

    /// Decodes, handles and encodes one client message. Malformed input
    /// and unknown sessions get an `Error` reply; the caller decides whether
    /// the connection survives.
    pub fn handle(&mut self, session: SessionId, body: &[u8], now: f64) -> Handled {
        let transport = match self.sessions.get(&session) {
            Some(s) => s.transport,
            None => {
                self.reject(Some(session), now, format!("unknown session {session}"));
                let reply = ServerMessage::Error { message: format!("unknown session {session}") };
                return Handled {
                    body: protocol::encode(&reply, &self.cfg.codec),
                    outcome: Outcome::UnknownSession,
                };
            }
        };
        self.account(session, transport, Direction::Inbound, body.len(), now);
        let (reply, outcome) = match protocol::decode::<ClientMessage>(body) {
            Ok(msg) => {
                let reply = self.handle_message(session, msg, now);
                let outcome = if matches!(reply, ServerMessage::Error { .. }) {
                    Outcome::Rejected
                } else {
                    Outcome::Ok
                };
                (reply, outcome)
            }
            Err(e) => {
                self.reject(Some(session), now, e.to_string());
                (ServerMessage::Error { message: e.to_string() }, Outcome::Malformed)
            }
        };
        let out = protocol::encode(&reply, &self.cfg.codec);
        self.account(session, transport, Direction::Outbound, out.len(), now);
        Handled { body: out, outcome }
    }

    fn account(&mut self, session: SessionId, transport: Transport, direction: Direction, len: usize, now: f64) {
        let count = protocol::wire_cost(len, transport, &self.cfg.overhead);
        self.bytes[transport_index(transport)] += count;
        if direction == Direction::Inbound {
            self.messages += 1;
        }
        self.emit(now, Some(session), None, EventKind::Bytes { transport, direction, count });
    }

    /// Records a refused message.
    pub fn reject(&mut self, session: Option<SessionId>, now: f64, reason: String) {
        debug!(?session, %reason, "rejected client message");
        self.rejected += 1;
        self.emit(now, session, None, EventKind::Rejected { reason });
    }

    pub fn handle_message(&mut self, session: SessionId, msg: ClientMessage, now: f64) -> ServerMessage {
        match self.sessions.get_mut(&session) {
            Some(s) => s.last_seen = now,
            None => {
                self.reject(Some(session), now, "unknown session".into());
                return ServerMessage::Error { message: format!("unknown session {session}") };
            }
        }
        match msg {
            ClientMessage::Hello { .. } => ServerMessage::Welcome { session_id: session },
            ClientMessage::RequestTasks { count } => {
                let tasks = self.queue.take_next(count as usize);
                if tasks.is_empty() {
                    return ServerMessage::Drained;
                }
                for t in &tasks {
                    self.emit(now, Some(session), Some(t.task_id), EventKind::TaskDispatched);
                }
                ServerMessage::Tasks {
                    tasks: tasks.into_iter().map(TaskSnapshot::from).collect(),
                }
            }
            ClientMessage::Partial {
                task_id,
                sequence,
                progress_units,
                partial_payload,
            } => {
                let cp = CheckpointRecord {
                    sequence,
                    partial_payload,
                    progress_units,
                };
                match self.queue.apply_partial(task_id, cp) {
                    Ok(outcome) => {
                        let status = AckStatus::from(outcome);
                        self.emit(now, Some(session), Some(task_id), EventKind::PartialReceived { status });
                        ServerMessage::Ack { task_id, status }
                    }
                    Err(e) => self.queue_error(session, now, e),
                }
            }
            ClientMessage::Final { task_id, sequence, payload } => {
                match self.queue.complete(task_id, payload, sequence) {
                    Ok(c) => {
                        let status = AckStatus::from(&c);
                        self.emit(now, Some(session), Some(task_id), EventKind::FinalReceived { status });
                        match c {
                            Completion::Accepted(task) => {
                                if let Some(s) = self.sessions.get_mut(&session) {
                                    s.tasks_completed += 1;
                                }
                                self.outbox.push((task_id, task.payload));
                                if self.queue.drained() {
                                    self.emit(now, None, None, EventKind::Drained);
                                }
                            }
                            Completion::Duplicate => self.duplicate_finals += 1,
                        }
                        ServerMessage::Ack { task_id, status }
                    }
                    Err(e) => self.queue_error(session, now, e),
                }
            }
        }
    }

    fn queue_error(&mut self, session: SessionId, now: f64, e: QueueError) -> ServerMessage {
        self.reject(Some(session), now, e.to_string());
        ServerMessage::Error { message: e.to_string() }
    }

    /// Accepted results waiting to be pushed to the source.
    pub fn take_outbox(&mut self) -> Vec<(TaskId, Payload)> {
        std::mem::take(&mut self.outbox)
    }

    pub fn record_pushed(&self, task: TaskId, now: f64) {
        self.emit(now, None, Some(task), EventKind::ResultPushed);
    }

    pub fn stats(&self) -> ManagerStats {
        ManagerStats {
            queued: self.queue.queued_len(),
            completed: self.queue.completed_len(),
            open_sessions: self.sessions.len(),
            value_sessions: self.value_sessions,
            non_value_sessions: self.non_value_sessions,
            cumulative_downtime: self.sink.closed_downtime(),
            bytes_request_response: self.bytes[0],
            bytes_stream: self.bytes[1],
            messages: self.messages,
            rejected: self.rejected,
            duplicate_finals: self.duplicate_finals,
            results_awaiting_push: self.outbox.len(),
        }
    }
}
