use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use reqwest::StatusCode;
use tokio_tungstenite::tungstenite::Message;
use volunteer_core::domain::{ExperimentConfig, Payload, SessionId};
use volunteer_core::kernels::{self, Problem};
use volunteer_core::metrics::{CloseReason, EventKind, EventSink};
use volunteer_core::protocol::{self, AckStatus, ClientMessage, CodecConfig, ServerMessage};
use volunteer_core::task_source::{BenchmarkSource, TaskSourceDescriptor};
use volunteer_core::client_runtime::run_task;
use volunteer_core::domain::PolicyConfig;
use volunteer_server::upstream::source_router;
use volunteer_server::{start, ServerConfig, ServerHandle, SharedSource, SourceConfig};

fn mc_source(n: u32) -> SharedSource<BenchmarkSource> {
    let cfg = ExperimentConfig {
        total_tasks: n,
        task_size: 500,
        ..ExperimentConfig::default()
    };
    SharedSource::new(BenchmarkSource::new(&Problem::for_experiment(&cfg).unwrap(), n).unwrap())
}

fn test_config() -> ServerConfig {
    ServerConfig {
        listen: "127.0.0.1:0".into(),
        poll_interval: 0.01,
        ..ServerConfig::default()
    }
}

async fn serve(n: u32) -> (ServerHandle, SharedSource<BenchmarkSource>) {
    let source = mc_source(n);
    let h = start(test_config(), Box::new(source.clone()), Arc::new(EventSink::in_memory()))
        .await
        .unwrap();
    wait_for(|| h.state().stats().queued == n as usize).await;
    (h, source)
}

async fn wait_for(cond: impl Fn() -> bool) {
    for _ in 0..500 {
        if cond() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("condition not met in time");
}

fn enc(msg: &ClientMessage) -> Vec<u8> {
    protocol::encode(msg, &CodecConfig::default())
}

async fn post(
    c: &reqwest::Client,
    h: &ServerHandle,
    path: &str,
    session: Option<SessionId>,
    msg: &ClientMessage,
) -> (StatusCode, ServerMessage) {
    let mut req = c.post(format!("{}{path}", h.base_url())).body(enc(msg));
    if let Some(s) = session {
        req = req.header("x-session", s.0.to_string());
    }
    let resp = req.send().await.unwrap();
    let status = resp.status();
    (status, protocol::decode(&resp.bytes().await.unwrap()).unwrap())
}

async fn hello(c: &reqwest::Client, h: &ServerHandle) -> SessionId {
    let msg = ClientMessage::Hello { client_info: "test".into() };
    match post(c, h, "/api/hello", None, &msg).await {
        (StatusCode::OK, ServerMessage::Welcome { session_id }) => session_id,
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn request_response_round_trip_delivers_results_upstream() {
    let (h, source) = serve(3).await;
    let c = reqwest::Client::new();
    let s = hello(&c, &h).await;
    let (st, reply) = post(&c, &h, "/api/tasks", Some(s), &ClientMessage::RequestTasks { count: 5 }).await;
    assert_eq!(st, StatusCode::OK);
    let ServerMessage::Tasks { tasks } = reply else { panic!("{reply:?}") };
    assert_eq!(tasks.len(), 3);
    for t in tasks {
        let steps = run_task(t.clone(), &PolicyConfig::sync_single()).unwrap();
        let (st, reply) = post(&c, &h, "/api/final", Some(s), &steps.last().unwrap().message).await;
        assert_eq!(st, StatusCode::OK);
        assert_eq!(reply, ServerMessage::Ack { task_id: t.task_id, status: AckStatus::Accepted });
    }
    let (_, reply) = post(&c, &h, "/api/tasks", Some(s), &ClientMessage::RequestTasks { count: 1 }).await;
    assert_eq!(reply, ServerMessage::Drained);
    wait_for(|| source.with(|s| s.is_complete())).await;
    let stats: serde_json::Value = c
        .get(format!("{}/admin/stats", h.base_url()))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(stats["completed"], 3);
    assert_eq!(stats["queued"], 0);
    let events = h.state().sink().snapshot();
    assert_eq!(events.iter().filter(|e| matches!(e.kind, EventKind::ResultPushed)).count(), 3);
    assert_eq!(events.iter().filter(|e| matches!(e.kind, EventKind::Drained)).count(), 1);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn bad_requests_get_error_replies_and_status_codes() {
    let (h, _) = serve(1).await;
    let c = reqwest::Client::new();
    let req = ClientMessage::RequestTasks { count: 1 };
    let (st, reply) = post(&c, &h, "/api/tasks", None, &req).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    assert!(matches!(reply, ServerMessage::Error { .. }));
    let (st, _) = post(&c, &h, "/api/tasks", Some(SessionId(999)), &req).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);

    let s = hello(&c, &h).await;
    let (st, _) = post(&c, &h, "/api/final", Some(s), &req).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let resp = c
        .post(format!("{}/api/tasks", h.base_url()))
        .header("x-session", s.0.to_string())
        .body("{\"type\":")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let unknown = ClientMessage::Final {
        task_id: volunteer_core::domain::TaskId(424242),
        sequence: 1,
        payload: Payload::new(),
    };
    let (st, reply) = post(&c, &h, "/api/final", Some(s), &unknown).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert!(matches!(reply, ServerMessage::Error { .. }));
    let resp = c
        .post(format!("{}/api/hello", h.base_url()))
        .body(enc(&req))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    // the session survives all of that
    let (st, reply) = post(&c, &h, "/api/tasks", Some(s), &req).await;
    assert_eq!(st, StatusCode::OK);
    assert!(matches!(reply, ServerMessage::Tasks { .. }));
    assert!(h.state().stats().rejected >= 6);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn bundles_are_served_with_cache_and_cors_headers() {
    let (h, _) = serve(1).await;
    let c = reqwest::Client::new();
    let url = format!("{}/bundle/{}", h.base_url(), kernels::MONTE_CARLO);
    let resp = c.get(&url).header("origin", "http://elsewhere.example").send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/javascript"));
    let etag = resp.headers()["etag"].to_str().unwrap().to_string();
    let body = resp.text().await.unwrap();
    let expected = h.state().manager().bundle(kernels::MONTE_CARLO).unwrap();
    assert_eq!(body, expected.body);
    assert_eq!(etag, format!("\"{}\"", expected.hash));
    let cached = c.get(&url).header("if-none-match", &etag).send().await.unwrap();
    assert_eq!(cached.status(), StatusCode::NOT_MODIFIED);
    let missing = c.get(format!("{}/bundle/nope", h.base_url())).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    let preflight = c
        .request(reqwest::Method::OPTIONS, format!("{}/api/tasks", h.base_url()))
        .header("origin", "http://elsewhere.example")
        .header("access-control-request-method", "POST")
        .header("access-control-request-headers", "x-session,content-type")
        .send()
        .await
        .unwrap();
    assert!(preflight.status().is_success());
    let served = h
        .state()
        .sink()
        .snapshot()
        .into_iter()
        .filter(|e| matches!(e.kind, EventKind::BundleServed { .. }))
        .count();
    assert_eq!(served, 1);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn stream_session_round_trip_and_disconnect() {
    let (h, _) = serve(2).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws", h.addr())).await.unwrap();
    let mut call = async |msg: &ClientMessage| -> ServerMessage {
        ws.send(Message::binary(enc(msg))).await.unwrap();
        loop {
            match ws.next().await.unwrap().unwrap() {
                Message::Text(t) => return protocol::decode(t.as_bytes()).unwrap(),
                Message::Binary(b) => return protocol::decode(&b).unwrap(),
                _ => continue,
            }
        }
    };
    let ServerMessage::Welcome { session_id } = call(&ClientMessage::Hello { client_info: "ws".into() }).await else {
        panic!()
    };
    let ServerMessage::Tasks { tasks } = call(&ClientMessage::RequestTasks { count: 1 }).await else { panic!() };
    let steps = run_task(tasks[0].clone(), &PolicyConfig::sync_single().with_checkpoints(100)).unwrap();
    for step in &steps {
        let reply = call(&step.message).await;
        let ServerMessage::Ack { status, .. } = reply else { panic!("{reply:?}") };
        assert!(matches!(status, AckStatus::Applied | AckStatus::Accepted));
    }
    assert!(matches!(call(&ClientMessage::RequestTasks { count: 0 }).await, ServerMessage::Error { .. }));
    drop(ws);
    wait_for(|| !h.state().manager().is_open(session_id)).await;
    let events = h.state().sink().snapshot();
    assert!(events.iter().any(|e| e.session == Some(session_id)
        && e.kind == EventKind::SessionClose { reason: CloseReason::Disconnect }));
    let stats = h.state().stats();
    assert_eq!((stats.completed, stats.value_sessions), (1, 1));
    assert!(stats.bytes_stream > 700);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn idle_request_response_sessions_are_reaped() {
    let source = mc_source(1);
    let cfg = ServerConfig {
        idle_timeout: 0.1,
        ..test_config()
    };
    let h = start(cfg, Box::new(source), Arc::new(EventSink::in_memory())).await.unwrap();
    let c = reqwest::Client::new();
    let s = hello(&c, &h).await;
    wait_for(|| !h.state().manager().is_open(s)).await;
    let (st, _) = post(&c, &h, "/api/tasks", Some(s), &ClientMessage::RequestTasks { count: 1 }).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    assert_eq!(h.state().stats().non_value_sessions, 1);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn remote_source_feeds_the_manager_and_receives_results() {
    let upstream = mc_source(4);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let up_addr = listener.local_addr().unwrap();
    let router = source_router(upstream.clone(), Some("t0ken".into()));
    tokio::spawn(async move { axum::serve(listener, router).await });

    let cfg = ServerConfig {
        source: SourceConfig::Remote(TaskSourceDescriptor {
            endpoint: format!("http://{up_addr}/"),
            poll_interval: 0.01,
            token: Some("t0ken".into()),
        }),
        ..test_config()
    };
    let src = volunteer_server::build_source(&cfg.source).unwrap();
    let h = start(cfg, src, Arc::new(EventSink::in_memory())).await.unwrap();
    wait_for(|| h.state().stats().queued == 4).await;
    let c = reqwest::Client::new();
    let s = hello(&c, &h).await;
    let (_, reply) = post(&c, &h, "/api/tasks", Some(s), &ClientMessage::RequestTasks { count: 4 }).await;
    let ServerMessage::Tasks { tasks } = reply else { panic!() };
    for t in tasks {
        let steps = run_task(t, &PolicyConfig::sync_single()).unwrap();
        post(&c, &h, "/api/final", Some(s), &steps.last().unwrap().message).await;
    }
    wait_for(|| upstream.with(|u| u.is_complete())).await;
    let expected = {
        let local = mc_source(4);
        let mut all = local.with(|l| volunteer_core::task_source::TaskSource::pull_tasks(l, 10).unwrap());
        let mut out = Vec::new();
        for t in all.drain(..) {
            let steps = run_task(t.into(), &PolicyConfig::sync_single()).unwrap();
            if let ClientMessage::Final { payload, .. } = &steps.last().unwrap().message {
                out.push(payload.clone());
            }
        }
        out
    };
    let got: Vec<Payload> = upstream.with(|u| u.results().values().cloned().collect());
    assert_eq!(got, expected);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn wrong_token_leaves_the_queue_empty_but_the_server_up() {
    let upstream = mc_source(2);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let up_addr = listener.local_addr().unwrap();
    let router = source_router(upstream.clone(), Some("right".into()));
    tokio::spawn(async move { axum::serve(listener, router).await });
    let cfg = ServerConfig {
        source: SourceConfig::Remote(TaskSourceDescriptor {
            endpoint: format!("http://{up_addr}"),
            poll_interval: 0.01,
            token: Some("wrong".into()),
        }),
        ..test_config()
    };
    let src = volunteer_server::build_source(&cfg.source).unwrap();
    let h = start(cfg, src, Arc::new(EventSink::in_memory())).await.unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;
    let c = reqwest::Client::new();
    let s = hello(&c, &h).await;
    let (_, reply) = post(&c, &h, "/api/tasks", Some(s), &ClientMessage::RequestTasks { count: 1 }).await;
    assert_eq!(reply, ServerMessage::Drained);
    assert_eq!(upstream.with(|u| u.results().len()), 0);
    h.shutdown().await.unwrap();
}
