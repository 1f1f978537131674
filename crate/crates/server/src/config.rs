//! Server configuration, read from TOML.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volunteer_core::domain::ExperimentConfig;
use volunteer_core::error::ConfigError;
use volunteer_core::protocol::{CodecConfig, OverheadConfig};
use volunteer_core::task_source::TaskSourceDescriptor;

pub const LISTEN_ENV: &str = "VOLUNTEER_LISTEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    /// Request-response sessions silent for this long are closed, seconds.
    pub idle_timeout: f64,
    /// Cadence of the source loop (pull, push, reap), seconds.
    pub poll_interval: f64,
    /// Pull more tasks when fewer than this many are queued.
    pub low_watermark: usize,
    pub pull_batch: usize,
    pub forward_attempts: u32,
    pub forward_capacity: usize,
    /// Extra `<kernel_id>.js` kernels; they override built-ins.
    pub bundle_dir: Option<PathBuf>,
    /// Append metric events here as NDJSON.
    pub event_log: Option<PathBuf>,
    pub codec: CodecConfig,
    pub overhead: OverheadConfig,
    pub source: SourceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    /// Serve a built-in benchmark split from an experiment description.
    Benchmark(Box<ExperimentConfig>),
    Remote(TaskSourceDescriptor),
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Benchmark(Box::default())
    }
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            idle_timeout: 30.0,
            poll_interval: 0.5,
            low_watermark: 256,
            pull_batch: 1024,
            forward_attempts: 10,
            forward_capacity: 100_000,
            bundle_dir: None,
            event_log: None,
            codec: CodecConfig::default(),
            overhead: OverheadConfig::default(),
            source: SourceConfig::default(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// `VOLUNTEER_LISTEN` overrides the listen address.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(LISTEN_ENV) {
            if !v.is_empty() {
                self.listen = v;
            }
        }
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("listen address {:?}: {e}", self.listen)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        for (name, v) in [("idle_timeout", self.idle_timeout), ("poll_interval", self.poll_interval)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be > 0")));
            }
        }
        if self.pull_batch == 0 {
            return Err(ConfigError::Invalid("pull_batch must be >= 1".into()));
        }
        match &self.source {
            SourceConfig::Benchmark(cfg) => cfg.validate(),
            SourceConfig::Remote(d) => d.validate(),
        }
    }
}
