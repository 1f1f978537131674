//! Metric events and everything derived from them: session classification,
//! downtime, and per-run summaries written as CSV.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::{ExperimentConfig, PolicyMode, SessionId, SessionRecord, TaskId, Transport};
use crate::protocol::AckStatus;

/// Bumped whenever a column is added, removed or reinterpreted.
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Client to server.
    Inbound,
    /// Server to client.
    Outbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    /// Dwell budget ran out; the visitor navigated away.
    Dwell,
    /// Still open when the last task completed.
    Drained,
    /// Request-response session went quiet for longer than the idle timeout.
    IdleTimeout,
    /// Stream connection dropped.
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    SessionOpen { transport: Transport },
    SessionClose { reason: CloseReason },
    DwellAssigned { seconds: f64 },
    BundleServed { kernel_id: String, bytes: u64 },
    TaskDispatched,
    PartialReceived { status: AckStatus },
    FinalReceived { status: AckStatus },
    WaitStart,
    WaitEnd,
    Bytes { transport: Transport, direction: Direction, count: u64 },
    Rejected { reason: String },
    ResultPushed,
    Drained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    /// Seconds since the start of the run.
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<SessionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl MetricEvent {
    pub fn new(t: f64, kind: EventKind) -> Self {
        Self {
            t,
            session: None,
            task: None,
            kind,
        }
    }

    pub fn session(mut self, s: SessionId) -> Self {
        self.session = Some(s);
        self
    }

    pub fn task(mut self, t: TaskId) -> Self {
        self.task = Some(t);
        self
    }
}

#[derive(Default)]
struct SinkInner {
    events: Vec<MetricEvent>,
    writer: Option<Box<dyn Write + Send>>,
    open_waits: HashMap<SessionId, f64>,
    downtime: f64,
}

/// Concurrent append-only event log, optionally mirrored to an NDJSON file.
pub struct EventSink {
    epoch: Instant,
    keep_in_memory: bool,
    inner: Mutex<SinkInner>,
}

impl Default for EventSink {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl std::fmt::Debug for EventSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventSink").field("events", &self.len()).finish()
    }
}

impl EventSink {
    pub fn in_memory() -> Self {
        Self {
            epoch: Instant::now(),
            keep_in_memory: true,
            inner: Mutex::default(),
        }
    }

    /// Appends every event to `writer` as one JSON line. With
    /// `keep_in_memory = false` only the running aggregates are retained.
    pub fn with_writer(writer: Box<dyn Write + Send>, keep_in_memory: bool) -> Self {
        Self {
            epoch: Instant::now(),
            keep_in_memory,
            inner: Mutex::new(SinkInner {
                writer: Some(writer),
                ..Default::default()
            }),
        }
    }

    /// Wall-clock seconds since the sink was created.
    pub fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    pub fn record(&self, event: MetricEvent) {
        let mut inner = self.inner.lock().expect("event sink poisoned");
        if let Some(s) = event.session {
            match event.kind {
                EventKind::WaitStart => {
                    inner.open_waits.insert(s, event.t);
                }
                EventKind::WaitEnd | EventKind::SessionClose { .. } => {
                    if let Some(start) = inner.open_waits.remove(&s) {
                        inner.downtime += (event.t - start).max(0.0);
                    }
                }
                _ => {}
            }
        }
        if let Some(w) = inner.writer.as_mut() {
            let line = serde_json::to_string(&event).expect("events serialize");
            if let Err(e) = writeln!(w, "{line}") {
                tracing::warn!(error = %e, "event log write failed");
            }
        }
        if self.keep_in_memory {
            inner.events.push(event);
        }
    }

    /// Stamps the event with the sink clock while holding the lock, so
    /// events recorded this way are totally ordered in time.
    pub fn record_now(&self, session: Option<SessionId>, task: Option<TaskId>, kind: EventKind) {
        let t = self.now();
        self.record(MetricEvent { t, session, task, kind });
    }

    /// Downtime of waits that have ended (or whose session closed).
    pub fn closed_downtime(&self) -> f64 {
        self.inner.lock().expect("event sink poisoned").downtime
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("event sink poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<MetricEvent> {
        self.inner.lock().expect("event sink poisoned").events.clone()
    }

    pub fn take(&self) -> Vec<MetricEvent> {
        std::mem::take(&mut self.inner.lock().expect("event sink poisoned").events)
    }

    pub fn flush(&self) -> io::Result<()> {
        match self.inner.lock().expect("event sink poisoned").writer.as_mut() {
            Some(w) => w.flush(),
            None => Ok(()),
        }
    }
}

pub fn write_ndjson<W: Write>(events: &[MetricEvent], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_ndjson<R: BufRead>(input: R) -> io::Result<Vec<MetricEvent>> {
    let mut events = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|err| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {err}", n + 1))
        })?;
        events.push(e);
    }
    Ok(events)
}

fn sorted(log: &[MetricEvent]) -> Vec<&MetricEvent> {
    let mut v: Vec<&MetricEvent> = log.iter().collect();
    v.sort_by(|a, b| a.t.total_cmp(&b.t));
    v
}

/// Rebuilds one record per opened session. Sessions never closed in the
/// log are closed at the drain time (or the last event).
pub fn session_records(log: &[MetricEvent]) -> Vec<SessionRecord> {
    let events = sorted(log);
    let end = drain_time(log).unwrap_or_else(|| events.last().map_or(0.0, |e| e.t));
    let mut order = Vec::new();
    let mut recs: HashMap<SessionId, SessionRecord> = HashMap::new();
    let mut waits: HashMap<SessionId, f64> = HashMap::new();
    for e in &events {
        let Some(s) = e.session else { continue };
        if let EventKind::SessionOpen { transport } = e.kind {
            order.push(s);
            recs.insert(
                s,
                SessionRecord {
                    session_id: s,
                    transport,
                    dwell_budget: None,
                    opened_at: e.t,
                    closed_at: f64::NAN,
                    tasks_completed: 0,
                    downtime: 0.0,
                    bytes_sent: 0,
                    bytes_received: 0,
                },
            );
            continue;
        }
        let Some(r) = recs.get_mut(&s) else { continue };
        match &e.kind {
            EventKind::SessionClose { .. } => {
                if r.closed_at.is_nan() {
                    r.closed_at = e.t;
                }
                if let Some(start) = waits.remove(&s) {
                    r.downtime += (e.t - start).max(0.0);
                }
            }
            EventKind::DwellAssigned { seconds } => r.dwell_budget = Some(*seconds),
            EventKind::FinalReceived { status: AckStatus::Accepted } => r.tasks_completed += 1,
            EventKind::WaitStart => {
                waits.entry(s).or_insert(e.t);
            }
            EventKind::WaitEnd => {
                if let Some(start) = waits.remove(&s) {
                    r.downtime += (e.t - start).max(0.0);
                }
            }
            // bytes are counted from the client's point of view
            EventKind::Bytes { direction: Direction::Inbound, count, .. } => r.bytes_sent += count,
            EventKind::Bytes { direction: Direction::Outbound, count, .. } => r.bytes_received += count,
            EventKind::BundleServed { bytes, .. } => r.bytes_received += bytes,
            _ => {}
        }
    }
    for (s, start) in waits {
        if let Some(r) = recs.get_mut(&s) {
            let close = if r.closed_at.is_nan() { end } else { r.closed_at };
            r.downtime += (close - start).max(0.0);
        }
    }
    order
        .into_iter()
        .filter_map(|s| recs.remove(&s))
        .map(|mut r| {
            if r.closed_at.is_nan() {
                r.closed_at = end.max(r.opened_at);
            }
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct SessionClassification {
    pub value: u64,
    pub non_value: u64,
    /// tasks completed → number of sessions
    pub per_session_tasks: BTreeMap<u64, u64>,
}

pub fn classify_sessions(log: &[MetricEvent]) -> SessionClassification {
    classify_records(&session_records(log))
}

pub fn classify_records(records: &[SessionRecord]) -> SessionClassification {
    let mut c = SessionClassification::default();
    for r in records {
        if r.is_value() {
            c.value += 1;
        } else {
            c.non_value += 1;
        }
        *c.per_session_tasks.entry(r.tasks_completed).or_default() += 1;
    }
    c
}

/// Sum over sessions of time spent idle with an empty local buffer.
pub fn total_downtime(log: &[MetricEvent]) -> f64 {
    session_records(log).iter().map(|r| r.downtime).sum()
}

pub fn drain_time(log: &[MetricEvent]) -> Option<f64> {
    log.iter()
        .filter(|e| matches!(e.kind, EventKind::Drained))
        .map(|e| e.t)
        .max_by(f64::total_cmp)
}

/// One row of the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub label: String,
    pub kernel: String,
    pub transport: String,
    pub policy: String,
    pub batch_size: u32,
    pub prefetch_threshold: u32,
    pub checkpoint_every: u64,
    pub shape: f64,
    pub scale: f64,
    pub task_size: u64,
    pub total_tasks: u64,
    pub worker_slots: u32,
    pub seed: u64,
    pub drained: bool,
    pub runtime: f64,
    pub completions: u64,
    pub sessions: u64,
    pub value_sessions: u64,
    pub non_value_sessions: u64,
    pub value_fraction: f64,
    pub max_tasks_per_session: u64,
    /// Share of accepted completions done by the busiest 10% of sessions.
    pub top_decile_share: f64,
    pub downtime: f64,
    pub bytes_request_response: u64,
    pub bytes_stream: u64,
    pub requests: u64,
    /// Client requests per second of runtime; the server load proxy.
    pub request_rate: f64,
    pub dispatches: u64,
    pub wasted_dispatches: u64,
    pub duplicate_finals: u64,
    pub stale_partials: u64,
    pub partials: u64,
    pub pushes: u64,
}

pub fn policy_label(mode: PolicyMode) -> &'static str {
    match mode {
        PolicyMode::SyncSingle => "sync-single",
        PolicyMode::Batch => "batch",
        PolicyMode::AsyncPrefetch => "async-prefetch",
    }
}

pub fn experiment_summary(log: &[MetricEvent], config: Option<&ExperimentConfig>) -> Summary {
    let records = session_records(log);
    let class = classify_records(&records);
    let first = log.iter().map(|e| e.t).min_by(f64::total_cmp).unwrap_or(0.0);
    let drained_at = drain_time(log);
    let last = log.iter().map(|e| e.t).max_by(f64::total_cmp).unwrap_or(0.0);
    let runtime = drained_at.unwrap_or(last) - first;

    let mut completions = 0u64;
    let mut duplicate_finals = 0u64;
    let mut stale_partials = 0u64;
    let mut partials = 0u64;
    let mut pushes = 0u64;
    let mut requests = 0u64;
    let mut dispatches = 0u64;
    let mut bytes: BTreeMap<Transport, u64> = BTreeMap::new();
    let mut dispatched: HashMap<SessionId, HashSet<TaskId>> = HashMap::new();
    let mut finalised: HashSet<(SessionId, TaskId)> = HashSet::new();
    let mut died: HashSet<SessionId> = HashSet::new();
    for e in log {
        match &e.kind {
            EventKind::FinalReceived { status } => {
                match status {
                    AckStatus::Accepted => completions += 1,
                    AckStatus::Duplicate => duplicate_finals += 1,
                    _ => {}
                }
                if let (Some(s), Some(t)) = (e.session, e.task) {
                    finalised.insert((s, t));
                }
            }
            EventKind::PartialReceived { status } => {
                partials += 1;
                if *status == AckStatus::Stale {
                    stale_partials += 1;
                }
            }
            EventKind::ResultPushed => pushes += 1,
            EventKind::Bytes { transport, direction, count } => {
                *bytes.entry(*transport).or_default() += count;
                if *direction == Direction::Inbound {
                    requests += 1;
                }
            }
            EventKind::BundleServed { bytes: b, .. } => {
                requests += 1;
                *bytes.entry(Transport::RequestResponse).or_default() += b;
            }
            EventKind::TaskDispatched => {
                dispatches += 1;
                if let (Some(s), Some(t)) = (e.session, e.task) {
                    dispatched.entry(s).or_default().insert(t);
                }
            }
            EventKind::SessionClose { reason } if *reason != CloseReason::Drained => {
                if let Some(s) = e.session {
                    died.insert(s);
                }
            }
            _ => {}
        }
    }
    let wasted_dispatches = dispatched
        .iter()
        .filter(|(s, _)| died.contains(s))
        .flat_map(|(s, tasks)| tasks.iter().map(move |t| (*s, *t)))
        .filter(|key| !finalised.contains(key))
        .count() as u64;

    let mut per_session: Vec<u64> = records.iter().map(|r| r.tasks_completed).collect();
    per_session.sort_unstable_by(|a, b| b.cmp(a));
    let top_n = per_session.len().div_ceil(10);
    let top: u64 = per_session.iter().take(top_n).sum();
    let done: u64 = per_session.iter().sum();
    let sessions = records.len() as u64;

    let mut s = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        label: String::new(),
        kernel: String::new(),
        transport: String::new(),
        policy: String::new(),
        batch_size: 0,
        prefetch_threshold: 0,
        checkpoint_every: 0,
        shape: 0.0,
        scale: 0.0,
        task_size: 0,
        total_tasks: 0,
        worker_slots: 0,
        seed: 0,
        drained: drained_at.is_some(),
        runtime,
        completions,
        sessions,
        value_sessions: class.value,
        non_value_sessions: class.non_value,
        value_fraction: if sessions == 0 { 0.0 } else { class.value as f64 / sessions as f64 },
        max_tasks_per_session: per_session.first().copied().unwrap_or(0),
        top_decile_share: if done == 0 { 0.0 } else { top as f64 / done as f64 },
        downtime: records.iter().map(|r| r.downtime).sum(),
        bytes_request_response: bytes.get(&Transport::RequestResponse).copied().unwrap_or(0),
        bytes_stream: bytes.get(&Transport::Stream).copied().unwrap_or(0),
        requests,
        request_rate: if runtime > 0.0 { requests as f64 / runtime } else { 0.0 },
        dispatches,
        wasted_dispatches,
        duplicate_finals,
        stale_partials,
        partials,
        pushes,
    };
    if let Some(cfg) = config {
        s.kernel = cfg.kernel_id.clone();
        s.transport = cfg.transport.to_string();
        s.policy = policy_label(cfg.policy.mode).to_string();
        s.batch_size = cfg.policy.batch_size;
        s.prefetch_threshold = cfg.policy.prefetch_threshold;
        s.checkpoint_every = cfg.policy.checkpoint_every.unwrap_or(0);
        if let crate::domain::DwellModel::Weibull { shape, scale } = cfg.dwell_model {
            s.shape = shape;
            s.scale = scale;
        }
        s.task_size = cfg.task_size;
        s.total_tasks = cfg.total_tasks as u64;
        s.worker_slots = cfg.worker_slots;
        s.seed = cfg.rng_seed;
    }
    s
}

impl Summary {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Field-wise mean of repeated runs of one configuration. Identity
    /// columns come from the first run; `seed` is that of the first run.
    pub fn mean(runs: &[Summary]) -> Option<Summary> {
        let first = runs.first()?.clone();
        let n = runs.len() as f64;
        let avg = |f: &dyn Fn(&Summary) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let avg_u = |f: &dyn Fn(&Summary) -> u64| (runs.iter().map(f).sum::<u64>() as f64 / n).round() as u64;
        Some(Summary {
            label: if first.label.is_empty() { "mean".into() } else { format!("{}-mean", first.label) },
            drained: runs.iter().all(|r| r.drained),
            runtime: avg(&|r| r.runtime),
            completions: avg_u(&|r| r.completions),
            sessions: avg_u(&|r| r.sessions),
            value_sessions: avg_u(&|r| r.value_sessions),
            non_value_sessions: avg_u(&|r| r.non_value_sessions),
            value_fraction: avg(&|r| r.value_fraction),
            max_tasks_per_session: avg_u(&|r| r.max_tasks_per_session),
            top_decile_share: avg(&|r| r.top_decile_share),
            downtime: avg(&|r| r.downtime),
            bytes_request_response: avg_u(&|r| r.bytes_request_response),
            bytes_stream: avg_u(&|r| r.bytes_stream),
            requests: avg_u(&|r| r.requests),
            request_rate: avg(&|r| r.request_rate),
            dispatches: avg_u(&|r| r.dispatches),
            wasted_dispatches: avg_u(&|r| r.wasted_dispatches),
            duplicate_finals: avg_u(&|r| r.duplicate_finals),
            stale_partials: avg_u(&|r| r.stale_partials),
            partials: avg_u(&|r| r.partials),
            pushes: avg_u(&|r| r.pushes),
            ..first
        })
    }
}

pub fn write_summaries_csv<W: Write>(rows: &[Summary], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries_csv<R: io::Read>(input: R) -> Result<Vec<Summary>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Serialize)]
struct HistogramRow<'a> {
    label: &'a str,
    tasks_completed: u64,
    sessions: u64,
}

/// Long-form histogram: one row per (label, tasks completed) bucket.
pub fn write_histogram_csv<W: Write>(
    rows: &[(String, SessionClassification)],
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for (label, c) in rows {
        for (&tasks, &sessions) in &c.per_session_tasks {
            w.serialize(HistogramRow {
                label,
                tasks_completed: tasks,
                sessions,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SessionRow {
    session: u64,
    transport: Transport,
    dwell_budget: Option<f64>,
    opened_at: f64,
    closed_at: f64,
    tasks_completed: u64,
    value: bool,
    downtime: f64,
    bytes_sent: u64,
    bytes_received: u64,
}

pub fn write_sessions_csv<W: Write>(records: &[SessionRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(SessionRow {
            session: r.session_id.0,
            transport: r.transport,
            dwell_budget: r.dwell_budget,
            opened_at: r.opened_at,
            closed_at: r.closed_at,
            tasks_completed: r.tasks_completed,
            value: r.is_value(),
            downtime: r.downtime,
            bytes_sent: r.bytes_sent,
            bytes_received: r.bytes_received,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, s: u64, kind: EventKind) -> MetricEvent {
        MetricEvent::new(t, kind).session(SessionId(s))
    }

    fn open(t: f64, s: u64) -> MetricEvent {
        ev(t, s, EventKind::SessionOpen { transport: Transport::RequestResponse })
    }

    fn close(t: f64, s: u64, reason: CloseReason) -> MetricEvent {
        ev(t, s, EventKind::SessionClose { reason })
    }

    fn accepted(t: f64, s: u64, task: u64) -> MetricEvent {
        ev(t, s, EventKind::FinalReceived { status: AckStatus::Accepted }).task(TaskId(task))
    }

    #[test]
    fn one_completion_makes_a_value_session() {
        let log = vec![
            open(0.0, 1),
            accepted(1.0, 1, 0),
            close(2.0, 1, CloseReason::Dwell),
            open(0.0, 2),
            ev(0.1, 2, EventKind::BundleServed { kernel_id: "add".into(), bytes: 10 }),
            close(0.5, 2, CloseReason::Dwell),
        ];
        let c = classify_sessions(&log);
        assert_eq!((c.value, c.non_value), (1, 1));
        assert_eq!(c.per_session_tasks[&1], 1);
        assert_eq!(c.per_session_tasks[&0], 1);
    }

    #[test]
    fn downtime_counts_empty_buffer_waits() {
        let log = vec![
            open(0.0, 1),
            ev(1.0, 1, EventKind::WaitStart),
            ev(1.4, 1, EventKind::WaitEnd),
            close(3.0, 1, CloseReason::Drained),
        ];
        assert!((total_downtime(&log) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn open_wait_is_closed_by_session_close() {
        let log = vec![
            open(0.0, 1),
            ev(1.0, 1, EventKind::WaitStart),
            close(1.5, 1, CloseReason::Dwell),
        ];
        assert!((total_downtime(&log) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unclosed_sessions_close_at_drain() {
        let log = vec![
            open(0.0, 1),
            ev(0.5, 1, EventKind::WaitStart),
            accepted(2.0, 1, 0),
            MetricEvent::new(2.0, EventKind::Drained),
        ];
        let recs = session_records(&log);
        assert_eq!(recs[0].closed_at, 2.0);
        assert!((recs[0].downtime - 1.5).abs() < 1e-12);
        assert!(recs[0].is_value());
    }

    #[test]
    fn summary_counts_and_waste() {
        let d = |t, s, task| ev(t, s, EventKind::TaskDispatched).task(TaskId(task));
        let log = vec![
            open(0.0, 1),
            open(0.0, 2),
            d(0.1, 1, 0),
            d(0.1, 2, 1),
            accepted(1.0, 1, 0),
            ev(1.0, 1, EventKind::ResultPushed).task(TaskId(0)),
            close(1.5, 2, CloseReason::Dwell),
            d(1.6, 1, 1),
            accepted(2.0, 1, 1),
            ev(2.0, 1, EventKind::ResultPushed).task(TaskId(1)),
            MetricEvent::new(2.0, EventKind::Drained),
        ];
        let s = experiment_summary(&log, None);
        assert!(s.drained);
        assert_eq!(s.runtime, 2.0);
        assert_eq!(s.completions, 2);
        assert_eq!(s.pushes, 2);
        assert_eq!(s.dispatches, 3);
        assert_eq!(s.wasted_dispatches, 1);
        assert_eq!(s.value_sessions + s.non_value_sessions, s.sessions);
        assert_eq!(s.top_decile_share, 1.0);
    }

    #[test]
    fn ndjson_round_trip_and_deterministic_summary() {
        let log = vec![
            open(0.0, 1),
            ev(0.2, 1, EventKind::Bytes { transport: Transport::Stream, direction: Direction::Inbound, count: 40 }),
            accepted(1.0, 1, 3),
            close(1.0, 1, CloseReason::Drained),
            MetricEvent::new(1.0, EventKind::Drained),
        ];
        let mut buf = Vec::new();
        write_ndjson(&log, &mut buf).unwrap();
        let back = read_ndjson(io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, log);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_summaries_csv(&[experiment_summary(&log, None)], &mut a).unwrap();
        write_summaries_csv(&[experiment_summary(&back, None)], &mut b).unwrap();
        assert_eq!(a, b);
        let rows = read_summaries_csv(io::Cursor::new(&a)).unwrap();
        assert_eq!(rows[0].schema_version, SUMMARY_SCHEMA_VERSION);
        assert_eq!(rows[0].bytes_stream, 40);
    }

    #[test]
    fn sink_tracks_downtime_incrementally() {
        let sink = EventSink::in_memory();
        sink.record(ev(1.0, 1, EventKind::WaitStart));
        sink.record(ev(1.25, 1, EventKind::WaitEnd));
        sink.record(ev(2.0, 1, EventKind::WaitStart));
        sink.record(close(2.5, 1, CloseReason::Dwell));
        assert!((sink.closed_downtime() - 0.75).abs() < 1e-12);
        assert_eq!(sink.len(), 4);
    }

    #[test]
    fn mean_of_identical_runs_is_identity() {
        let log = vec![open(0.0, 1), accepted(1.0, 1, 0), MetricEvent::new(1.0, EventKind::Drained)];
        let s = experiment_summary(&log, None);
        let m = Summary::mean(&[s.clone(), s.clone()]).unwrap();
        assert_eq!(m.runtime, s.runtime);
        assert_eq!(m.completions, s.completions);
        assert_eq!(m.label, "mean");
    }
}
