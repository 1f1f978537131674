//! HTTP routes: request-response messaging, the WebSocket stream, bundles
//! and admin counters.

use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tower_http::cors::{Any, CorsLayer};
use tracing::debug;
use volunteer_core::bundle::BundleRegistry;
use volunteer_core::domain::{SessionId, Transport};
use volunteer_core::manager::{Handled, Outcome};
use volunteer_core::metrics::{CloseReason, EventSink};
use volunteer_core::protocol::{self, ClientMessage, ServerMessage};
use volunteer_core::{Manager, ManagerConfig, ManagerStats};

use crate::config::ServerConfig;
use crate::error::ServerError;

pub const SESSION_HEADER: &str = "x-session";

pub struct AppState {
    manager: Mutex<Manager>,
    sink: Arc<EventSink>,
    config: ServerConfig,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState").field("listen", &self.config.listen).finish()
    }
}

impl AppState {
    pub fn new(config: ServerConfig, sink: Arc<EventSink>) -> Result<Self, ServerError> {
        let bundles = match &config.bundle_dir {
            Some(dir) => BundleRegistry::with_dir(dir)?,
            None => BundleRegistry::builtin(),
        };
        let manager = Manager::new(
            ManagerConfig {
                codec: config.codec,
                overhead: config.overhead,
            },
            sink.clone(),
            bundles,
        );
        Ok(Self {
            manager: Mutex::new(manager),
            sink,
            config,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn sink(&self) -> &Arc<EventSink> {
        &self.sink
    }

    /// Seconds on the event clock.
    pub fn now(&self) -> f64 {
        self.sink.now()
    }

    /// A panic while holding the lock leaves the manager usable; every
    /// mutation it makes is complete before it returns.
    pub fn manager(&self) -> MutexGuard<'_, Manager> {
        self.manager.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn stats(&self) -> ManagerStats {
        self.manager().stats()
    }

    fn error_body(&self, message: String) -> Vec<u8> {
        protocol::encode(&ServerMessage::Error { message }, &self.config.codec)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, HeaderName::from_static(SESSION_HEADER)])
        .expose_headers([header::ETAG]);
    Router::new()
        .route("/api/hello", post(hello))
        .route("/api/tasks", post(|s, h, b| message(s, h, b, Kind::RequestTasks)))
        .route("/api/partial", post(|s, h, b| message(s, h, b, Kind::Partial)))
        .route("/api/final", post(|s, h, b| message(s, h, b, Kind::Final)))
        .route("/ws", get(ws_upgrade))
        .route("/bundle/{kernel_id}", get(bundle))
        .route("/admin/stats", get(stats))
        .route("/healthz", get(|| async { "ok" }))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    RequestTasks,
    Partial,
    Final,
}

impl Kind {
    fn matches(self, msg: &ClientMessage) -> bool {
        matches!(
            (self, msg),
            (Kind::RequestTasks, ClientMessage::RequestTasks { .. })
                | (Kind::Partial, ClientMessage::Partial { .. })
                | (Kind::Final, ClientMessage::Final { .. })
        )
    }
}

fn reply(body: Vec<u8>, status: StatusCode) -> Response {
    let content_type = if protocol::is_compressed(&body) {
        "application/octet-stream"
    } else {
        "application/json"
    };
    (
        status,
        [
            (header::CONTENT_TYPE, content_type),
            (header::CACHE_CONTROL, "no-store"),
        ],
        body,
    )
        .into_response()
}

fn status_of(outcome: Outcome) -> StatusCode {
    match outcome {
        Outcome::Ok => StatusCode::OK,
        Outcome::Rejected => StatusCode::CONFLICT,
        Outcome::Malformed => StatusCode::BAD_REQUEST,
        Outcome::UnknownSession => StatusCode::UNAUTHORIZED,
    }
}

fn handled(h: Handled) -> Response {
    let status = status_of(h.outcome);
    reply(h.body, status)
}

async fn hello(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let problem = match protocol::decode::<ClientMessage>(&body) {
        Ok(ClientMessage::Hello { .. }) => None,
        Ok(_) => Some("expected hello".to_string()),
        Err(e) => Some(e.to_string()),
    };
    if let Some(problem) = problem {
        st.manager().reject(None, st.now(), problem.clone());
        return reply(st.error_body(problem), StatusCode::BAD_REQUEST);
    }
    let h = {
        let mut m = st.manager();
        let now = st.now();
        let s = m.open_session(Transport::RequestResponse, now);
        m.handle(s, &body, now)
    };
    handled(h)
}

fn session_from(headers: &HeaderMap) -> Option<SessionId> {
    headers
        .get(SESSION_HEADER)?
        .to_str()
        .ok()?
        .trim()
        .parse()
        .ok()
        .map(SessionId)
}

async fn message(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes, kind: Kind) -> Response {
    let Some(session) = session_from(&headers) else {
        let problem = format!("missing or invalid {SESSION_HEADER} header");
        st.manager().reject(None, st.now(), problem.clone());
        return reply(st.error_body(problem), StatusCode::UNAUTHORIZED);
    };
    if let Ok(msg) = protocol::decode::<ClientMessage>(&body) {
        if !kind.matches(&msg) {
            let problem = format!("message does not belong on this endpoint ({kind:?})");
            st.manager().reject(Some(session), st.now(), problem.clone());
            return reply(st.error_body(problem), StatusCode::BAD_REQUEST);
        }
    }
    let h = st.manager().handle(session, &body, st.now());
    handled(h)
}

async fn ws_upgrade(State(st): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_session(st, socket))
}

async fn stream_session(st: Arc<AppState>, mut socket: WebSocket) {
    let session = st.manager().open_session(Transport::Stream, st.now());
    debug!(%session, "stream opened");
    while let Some(Ok(frame)) = socket.recv().await {
        let body: Bytes = match frame {
            Message::Text(t) => Bytes::copy_from_slice(t.as_str().as_bytes()),
            Message::Binary(b) => b,
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        let h = st.manager().handle(session, &body, st.now());
        let gone = h.outcome == Outcome::UnknownSession;
        let out = if protocol::is_compressed(&h.body) {
            Message::Binary(h.body.into())
        } else {
            match String::from_utf8(h.body) {
                Ok(s) => Message::Text(s.into()),
                Err(e) => Message::Binary(e.into_bytes().into()),
            }
        };
        if socket.send(out).await.is_err() || gone {
            break;
        }
    }
    st.manager().close_session(session, CloseReason::Disconnect, st.now());
    debug!(%session, "stream closed");
}

async fn bundle(
    State(st): State<Arc<AppState>>,
    Path(kernel_id): Path<String>,
    headers: HeaderMap,
) -> Response {
    let etag = match st.manager().bundle(&kernel_id) {
        Some(b) => format!("\"{}\"", b.hash),
        None => return (StatusCode::NOT_FOUND, format!("no bundle for kernel {kernel_id:?}\n")).into_response(),
    };
    let cached = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag));
    let etag_value = HeaderValue::from_str(&etag).expect("hex hash is a valid header value");
    if cached {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag_value)]).into_response();
    }
    let session = session_from(&headers);
    let Some(b) = st.manager().serve_bundle(&kernel_id, session, st.now()) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("text/javascript; charset=utf-8")),
            (header::CACHE_CONTROL, HeaderValue::from_static("no-cache")),
            (header::ETAG, etag_value),
        ],
        b.body.clone(),
    )
        .into_response()
}

async fn stats(State(st): State<Arc<AppState>>) -> Json<ManagerStats> {
    Json(st.stats())
}
