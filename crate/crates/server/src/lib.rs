//! Network front of the task manager: HTTP request-response and WebSocket
//! transports, kernel bundles, the upstream task source loop, and a live
//! swarm driver that runs simulated browsers against a real server.

pub mod app;
pub mod config;
pub mod error;
pub mod faults;
pub mod live;
pub mod proxy;
pub mod upstream;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::oneshot;
use tracing::{info, warn};
use volunteer_core::metrics::EventSink;
use volunteer_core::task_source::{BenchmarkSource, TaskSource};
use volunteer_core::kernels::Problem;

pub use app::{router, AppState};
pub use config::{ServerConfig, SourceConfig};
pub use error::{LiveError, ServerError};
pub use upstream::{HttpTaskSource, SharedSource, SourceLoop};

/// A running server. Dropping it without [`ServerHandle::shutdown`] leaves
/// the listener running until the runtime ends.
pub struct ServerHandle {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
    stop: Arc<AtomicBool>,
    poller: std::thread::JoinHandle<SourceLoop>,
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle").field("addr", &self.addr).finish()
    }
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Stops accepting, gives open connections a second to finish, then
    /// runs a last source round and flushes the event log.
    pub async fn shutdown(mut self) -> Result<(), ServerError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match tokio::time::timeout(Duration::from_secs(1), &mut self.server).await {
            Ok(Ok(r)) => r?,
            Ok(Err(e)) if e.is_panic() => warn!("server task panicked"),
            Ok(Err(_)) => {}
            Err(_) => self.server.abort(),
        }
        self.stop.store(true, Ordering::Relaxed);
        let poller = self.poller;
        let left = tokio::task::spawn_blocking(move || poller.join())
            .await
            .ok()
            .and_then(Result::ok)
            .map_or(0, |l| l.pending_results());
        if left > 0 {
            warn!(left, "results still undelivered at shutdown");
        }
        self.state.sink().flush()?;
        Ok(())
    }
}

/// Builds the configured source. Benchmarks are split here; remote sources
/// connect lazily.
pub fn build_source(cfg: &SourceConfig) -> Result<Box<dyn TaskSource>, ServerError> {
    Ok(match cfg {
        SourceConfig::Benchmark(e) => {
            let problem = Problem::for_experiment(e)?;
            Box::new(BenchmarkSource::new(&problem, e.total_tasks)?)
        }
        SourceConfig::Remote(d) => Box::new(HttpTaskSource::new(d)),
    })
}

/// Binds, starts the source loop and serves until shut down.
pub async fn start(
    config: ServerConfig,
    source: Box<dyn TaskSource>,
    sink: Arc<EventSink>,
) -> Result<ServerHandle, ServerError> {
    config.validate()?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|source| ServerError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
    let addr = listener.local_addr()?;
    let state = Arc::new(AppState::new(config, sink)?);
    let stop = Arc::new(AtomicBool::new(false));
    let poller = SourceLoop::new(state.clone(), source).spawn(stop.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = rx.await;
            })
            .await
    });
    info!(%addr, "listening");
    Ok(ServerHandle {
        addr,
        state,
        shutdown: Some(tx),
        server,
        stop,
        poller,
    })
}
