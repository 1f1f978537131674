//! Fault injection: clients that vanish at random points of the protocol.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tokio_tungstenite::tungstenite::Message;
use volunteer_core::client_runtime::TaskExecution;
use volunteer_core::domain::{PolicyConfig, SessionId};
use volunteer_core::protocol::{self, ClientMessage, CodecConfig, ServerMessage, TaskSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Fault {
    /// Connect and close without a byte.
    BareConnect,
    /// Close in the middle of the request headers.
    TruncatedHeaders,
    /// Hello sent, reply never read.
    HelloUnread,
    /// Tasks requested, reply never read.
    RequestUnread,
    /// A checkpoint sent, reply never read.
    PartialUnread,
    /// A final result cut off halfway through its body.
    TruncatedFinal,
    /// A complete final result, reply never read.
    FinalUnread,
    /// Stream opened, then dropped before hello.
    StreamBeforeHello,
    /// Stream dropped while tasks are being handed out.
    StreamMidRequest,
    /// Stream sends garbage, then drops.
    StreamGarbage,
}

impl Fault {
    pub const ALL: [Fault; 10] = [
        Fault::BareConnect,
        Fault::TruncatedHeaders,
        Fault::HelloUnread,
        Fault::RequestUnread,
        Fault::PartialUnread,
        Fault::TruncatedFinal,
        Fault::FinalUnread,
        Fault::StreamBeforeHello,
        Fault::StreamMidRequest,
        Fault::StreamGarbage,
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultReport {
    pub injected: BTreeMap<Fault, u64>,
    /// Faults that could not reach their target state (e.g. no task was
    /// available to abandon). They still disconnected.
    pub degraded: u64,
}

impl FaultReport {
    pub fn total(&self) -> u64 {
        self.injected.values().sum()
    }
}

fn http_request(addr: SocketAddr, path: &str, session: Option<SessionId>, body: &[u8]) -> Vec<u8> {
    let mut head = format!(
        "POST {path} HTTP/1.1\r\nhost: {addr}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n",
        body.len()
    );
    if let Some(s) = session {
        head.push_str(&format!("x-session: {}\r\n", s.0));
    }
    head.push_str("\r\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(body);
    out
}

async fn send_and_vanish(addr: SocketAddr, bytes: &[u8]) -> std::io::Result<()> {
    let mut s = TcpStream::connect(addr).await?;
    s.write_all(bytes).await?;
    s.flush().await
}

struct Probe {
    addr: SocketAddr,
    http: reqwest::Client,
    codec: CodecConfig,
}

impl Probe {
    async fn exchange(&self, path: &str, session: Option<SessionId>, msg: &ClientMessage) -> Option<ServerMessage> {
        let mut req = self
            .http
            .post(format!("http://{}{path}", self.addr))
            .header("content-type", "application/json")
            .body(protocol::encode(msg, &self.codec));
        if let Some(s) = session {
            req = req.header(crate::app::SESSION_HEADER, s.0.to_string());
        }
        let body = req.send().await.ok()?.bytes().await.ok()?;
        protocol::decode(&body).ok()
    }

    async fn hello(&self) -> Option<SessionId> {
        let hello = ClientMessage::Hello {
            client_info: "fault-injector".into(),
        };
        match self.exchange("/api/hello", None, &hello).await? {
            ServerMessage::Welcome { session_id } => Some(session_id),
            _ => None,
        }
    }

    async fn one_task(&self) -> Option<(SessionId, TaskSnapshot)> {
        let s = self.hello().await?;
        match self.exchange("/api/tasks", Some(s), &ClientMessage::RequestTasks { count: 1 }).await? {
            ServerMessage::Tasks { mut tasks } if !tasks.is_empty() => Some((s, tasks.remove(0))),
            _ => None,
        }
    }
}

/// The first checkpoint or the final message for `task`.
fn work(task: TaskSnapshot, checkpoint: bool) -> Option<ClientMessage> {
    let mut policy = PolicyConfig::sync_single();
    if checkpoint {
        policy = policy.with_checkpoints(1);
    }
    let mut exec = TaskExecution::start(task, &policy, true).ok()?;
    let mut last = None;
    while let Some(step) = exec.step().ok()? {
        let is_partial = matches!(step.message, ClientMessage::Partial { .. });
        last = Some(step.message);
        if checkpoint && is_partial {
            break;
        }
    }
    last
}

/// Returns false when the fault could not reach its intended state.
async fn inject_one(probe: &Probe, fault: Fault, rng: &mut ChaCha8Rng) -> bool {
    let addr = probe.addr;
    match fault {
        Fault::BareConnect => TcpStream::connect(addr).await.is_ok(),
        Fault::TruncatedHeaders => {
            let req = http_request(addr, "/api/tasks", Some(SessionId(1)), b"{}");
            let cut = rng.random_range(1..req.len() - 4);
            send_and_vanish(addr, &req[..cut]).await.is_ok()
        }
        Fault::HelloUnread => {
            let hello = protocol::encode(
                &ClientMessage::Hello {
                    client_info: "fault-injector".into(),
                },
                &probe.codec,
            );
            send_and_vanish(addr, &http_request(addr, "/api/hello", None, &hello))
                .await
                .is_ok()
        }
        Fault::RequestUnread => {
            let Some(s) = probe.hello().await else { return false };
            let body = protocol::encode(&ClientMessage::RequestTasks { count: rng.random_range(1..4) }, &probe.codec);
            send_and_vanish(addr, &http_request(addr, "/api/tasks", Some(s), &body))
                .await
                .is_ok()
        }
        Fault::PartialUnread | Fault::TruncatedFinal | Fault::FinalUnread => {
            let Some((s, task)) = probe.one_task().await else { return false };
            let partial = fault == Fault::PartialUnread;
            let Some(msg) = work(task, partial) else { return false };
            if partial && !matches!(msg, ClientMessage::Partial { .. }) {
                return false;
            }
            let path = if partial { "/api/partial" } else { "/api/final" };
            let body = protocol::encode(&msg, &probe.codec);
            let req = http_request(addr, path, Some(s), &body);
            let end = if fault == Fault::TruncatedFinal {
                req.len() - body.len() + rng.random_range(0..body.len())
            } else {
                req.len()
            };
            send_and_vanish(addr, &req[..end]).await.is_ok()
        }
        Fault::StreamBeforeHello | Fault::StreamMidRequest | Fault::StreamGarbage => {
            let Ok((mut ws, _)) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await else {
                return false;
            };
            match fault {
                Fault::StreamBeforeHello => {}
                Fault::StreamGarbage => {
                    let _ = ws.send(Message::text("{\"type\":\"final\",\"task_id\":")).await;
                    let _ = ws.next().await;
                }
                _ => {
                    let hello = ClientMessage::Hello {
                        client_info: "fault-injector".into(),
                    };
                    let _ = ws.send(Message::binary(protocol::encode(&hello, &probe.codec))).await;
                    let _ = ws.next().await;
                    let req = ClientMessage::RequestTasks { count: rng.random_range(1..4) };
                    let _ = ws.send(Message::binary(protocol::encode(&req, &probe.codec))).await;
                }
            }
            true
        }
    }
}

/// Injects `count` faults of uniformly random kinds, `concurrency` at a
/// time, against the server at `addr`.
pub async fn inject(addr: SocketAddr, count: u64, seed: u64, concurrency: usize, codec: CodecConfig) -> FaultReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Arc::new(Probe {
        addr,
        http: reqwest::Client::new(),
        codec,
    });
    let permits = Arc::new(Semaphore::new(concurrency.max(1)));
    let mut set = JoinSet::new();
    let mut report = FaultReport::default();
    for _ in 0..count {
        let fault = Fault::ALL[rng.random_range(0..Fault::ALL.len())];
        *report.injected.entry(fault).or_default() += 1;
        let mut local = ChaCha8Rng::seed_from_u64(rng.random());
        let probe = probe.clone();
        let permit = permits.clone().acquire_owned().await.expect("semaphore is never closed");
        set.spawn(async move {
            let ok = inject_one(&probe, fault, &mut local).await;
            drop(permit);
            ok
        });
    }
    while let Some(r) = set.join_next().await {
        if !matches!(r, Ok(true)) {
            report.degraded += 1;
        }
    }
    report
}
