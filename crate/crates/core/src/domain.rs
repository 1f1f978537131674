//! Shared vocabulary: tasks, checkpoints, sessions, scheduling policies and
//! experiment configuration.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Free-form key/value document carried by a task. Kernels own the schema;
/// the manager never looks inside.
pub type Payload = serde_json::Map<String, serde_json::Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskStatus {
    Queued,
    Completed,
}

/// A numbered partial result. `progress_units` is kernel defined
/// (iterations for Monte Carlo, pixels for Mandelbrot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub sequence: u64,
    pub partial_payload: Payload,
    pub progress_units: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: TaskId,
    pub kernel_id: String,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<CheckpointRecord>,
    pub status: TaskStatus,
    pub dispatch_count: u64,
}

impl Task {
    pub fn new(task_id: TaskId, kernel_id: impl Into<String>, payload: Payload) -> Self {
        Self {
            task_id,
            kernel_id: kernel_id.into(),
            payload,
            checkpoint: None,
            status: TaskStatus::Queued,
            dispatch_count: 0,
        }
    }

    /// Progress recorded by the latest checkpoint, zero if none.
    pub fn checkpoint_progress(&self) -> u64 {
        self.checkpoint.as_ref().map_or(0, |c| c.progress_units)
    }

    pub fn checkpoint_sequence(&self) -> u64 {
        self.checkpoint.as_ref().map_or(0, |c| c.sequence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    RequestResponse,
    Stream,
}

impl Transport {
    pub const ALL: [Transport; 2] = [Transport::RequestResponse, Transport::Stream];

    pub fn as_str(self) -> &'static str {
        match self {
            Transport::RequestResponse => "request-response",
            Transport::Stream => "stream",
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Transport {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "request-response" | "rr" | "http" | "xhr" => Ok(Transport::RequestResponse),
            "stream" | "ws" | "websocket" => Ok(Transport::Stream),
            other => Err(ConfigError::Invalid(format!("unknown transport `{other}`"))),
        }
    }
}

/// One browser visit, as reconstructed from the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: SessionId,
    pub transport: Transport,
    /// Seconds; `None` for sessions that live until the run drains.
    pub dwell_budget: Option<f64>,
    pub opened_at: f64,
    pub closed_at: f64,
    pub tasks_completed: u64,
    pub downtime: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl SessionRecord {
    pub fn is_value(&self) -> bool {
        self.tasks_completed >= 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    SyncSingle,
    Batch,
    AsyncPrefetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    #[serde(default = "one")]
    pub batch_size: u32,
    #[serde(default)]
    pub prefetch_threshold: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
}

fn one() -> u32 {
    1
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::sync_single()
    }
}

impl PolicyConfig {
    pub fn sync_single() -> Self {
        Self {
            mode: PolicyMode::SyncSingle,
            batch_size: 1,
            prefetch_threshold: 0,
            checkpoint_every: None,
        }
    }

    pub fn batch(batch_size: u32) -> Self {
        Self {
            mode: PolicyMode::Batch,
            batch_size,
            prefetch_threshold: 0,
            checkpoint_every: None,
        }
    }

    pub fn async_prefetch(batch_size: u32, prefetch_threshold: u32) -> Self {
        Self {
            mode: PolicyMode::AsyncPrefetch,
            batch_size,
            prefetch_threshold,
            checkpoint_every: None,
        }
    }

    pub fn with_checkpoints(mut self, every: u64) -> Self {
        self.checkpoint_every = Some(every);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(ConfigError::Invalid(
                "checkpoint_every must be positive".into(),
            ));
        }
        match self.mode {
            PolicyMode::SyncSingle if self.batch_size != 1 => Err(ConfigError::Invalid(
                "sync-single policy requires batch_size = 1".into(),
            )),
            PolicyMode::AsyncPrefetch if self.prefetch_threshold >= self.batch_size => {
                Err(ConfigError::Invalid(
                    "async-prefetch requires prefetch_threshold < batch_size".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Tasks requested per exchange.
    pub fn request_size(&self) -> u32 {
        match self.mode {
            PolicyMode::SyncSingle => 1,
            PolicyMode::Batch | PolicyMode::AsyncPrefetch => self.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DwellModel {
    /// Sessions stay until the run drains.
    Constant,
    Weibull { shape: f64, scale: f64 },
}

impl DwellModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match *self {
            DwellModel::Constant => Ok(()),
            DwellModel::Weibull { shape, scale } => {
                if !(shape.is_finite() && shape > 0.0) {
                    return Err(ConfigError::Invalid("weibull shape must be > 0".into()));
                }
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(ConfigError::Invalid("weibull scale must be > 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn shape(&self) -> Option<f64> {
        match *self {
            DwellModel::Constant => None,
            DwellModel::Weibull { shape, .. } => Some(shape),
        }
    }

    /// Weibull with the scale chosen so the mean dwell is `mean` seconds:
    /// λ = mean / Γ(1 + 1/k).
    pub fn weibull_with_mean(shape: f64, mean: f64) -> Self {
        DwellModel::Weibull {
            shape,
            scale: mean / gamma(1.0 + 1.0 / shape),
        }
    }

    /// Weibull with the scale chosen so the median dwell is `median`
    /// seconds: λ = median / (ln 2)^(1/k).
    pub fn weibull_with_median(shape: f64, median: f64) -> Self {
        DwellModel::Weibull {
            shape,
            scale: median / std::f64::consts::LN_2.powf(1.0 / shape),
        }
    }
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
pub fn gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = COEF[0];
        let t = x + G + 0.5;
        for (i, c) in COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}

/// Modeled network and server costs used by the virtual-time simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkModel {
    /// One-way propagation delay, seconds.
    pub latency: f64,
    /// Link throughput, bytes per second.
    pub bandwidth: f64,
    /// Fixed server cost per handled message, seconds.
    pub service_time: f64,
    /// Additional server cost per byte handled (in + out), seconds.
    pub service_per_byte: f64,
    /// Worker start-up between receiving the bundle and the first message, seconds.
    pub client_init: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            latency: 0.015,
            bandwidth: 12.5e6,
            service_time: 0.002,
            service_per_byte: 2e-8,
            client_init: 0.2,
        }
    }
}

/// Everything needed to reproduce one run. Keys missing from a config file
/// take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kernel_id: String,
    pub total_tasks: u32,
    /// Work units per task (iterations for Monte Carlo, pixels for
    /// Mandelbrot are derived from the grid instead).
    pub task_size: u64,
    pub worker_slots: u32,
    pub dwell_model: DwellModel,
    pub transport: Transport,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub rng_seed: u64,
    /// Simulated seconds per work unit.
    pub compute_scale: f64,
    /// Run kernels for real; when false only progress is simulated and
    /// payloads carry no results.
    #[serde(default = "yes")]
    pub execute_kernels: bool,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default)]
    pub overhead: crate::protocol::OverheadConfig,
    #[serde(default)]
    pub codec: crate::protocol::CodecConfig,
    /// Abort the run after this much (virtual) time.
    #[serde(default = "default_time_cap")]
    pub time_cap: f64,
    #[serde(default)]
    pub mandelbrot: crate::kernels::MandelbrotProblem,
}

fn yes() -> bool {
    true
}

fn default_time_cap() -> f64 {
    36_000.0
}

/// Work units of the desk-scale stand-in for a 200 million iteration task.
pub const DESK_TASK_UNITS: u64 = 10_000;
/// Average task time reported for 200 million iteration tasks, seconds.
pub const MEAN_TASK_SECONDS: f64 = 3.75;
/// Concurrent browsers in the reference setup (six machines, four cores).
pub const DEFAULT_WORKER_SLOTS: u32 = 24;
pub const DEFAULT_TOTAL_TASKS: u32 = 720;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kernel_id: crate::kernels::MONTE_CARLO.to_string(),
            total_tasks: DEFAULT_TOTAL_TASKS,
            task_size: DESK_TASK_UNITS,
            worker_slots: DEFAULT_WORKER_SLOTS,
            dwell_model: DwellModel::Constant,
            transport: Transport::RequestResponse,
            policy: PolicyConfig::sync_single(),
            rng_seed: 1,
            compute_scale: MEAN_TASK_SECONDS / DESK_TASK_UNITS as f64,
            execute_kernels: true,
            network: NetworkModel::default(),
            overhead: Default::default(),
            codec: Default::default(),
            time_cap: default_time_cap(),
            mandelbrot: Default::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.total_tasks == 0 {
            return Err(ConfigError::Invalid("total_tasks must be >= 1".into()));
        }
        if self.worker_slots == 0 {
            return Err(ConfigError::Invalid("worker_slots must be >= 1".into()));
        }
        if self.task_size == 0 && self.kernel_id == crate::kernels::MONTE_CARLO {
            return Err(ConfigError::Invalid("task_size must be >= 1".into()));
        }
        if !(self.compute_scale.is_finite() && self.compute_scale >= 0.0) {
            return Err(ConfigError::Invalid("compute_scale must be >= 0".into()));
        }
        if !(self.time_cap > 0.0) {
            return Err(ConfigError::Invalid("time_cap must be > 0".into()));
        }
        let net = &self.network;
        if !(net.latency >= 0.0
            && net.bandwidth > 0.0
            && net.service_time >= 0.0
            && net.service_per_byte >= 0.0
            && net.client_init >= 0.0)
        {
            return Err(ConfigError::Invalid("network model values out of range".into()));
        }
        self.dwell_model.validate()?;
        self.policy.validate()?;
        crate::kernels::lookup(&self.kernel_id)
            .map(|_| ())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Mean simulated compute time per task.
    pub fn mean_task_seconds(&self) -> f64 {
        self.task_size as f64 * self.compute_scale
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_matches_known_values() {
        assert!((gamma(1.0) - 1.0).abs() < 1e-12);
        assert!((gamma(3.0) - 2.0).abs() < 1e-12);
        assert!((gamma(0.5) - std::f64::consts::PI.sqrt()).abs() < 1e-12);
        assert!((gamma(5.0) - 24.0).abs() < 1e-10);
    }

    #[test]
    fn policy_invariants() {
        assert!(PolicyConfig::sync_single().validate().is_ok());
        let mut bad = PolicyConfig::sync_single();
        bad.batch_size = 3;
        assert!(bad.validate().is_err());
        assert!(PolicyConfig::async_prefetch(5, 2).validate().is_ok());
        assert!(PolicyConfig::async_prefetch(5, 5).validate().is_err());
        assert!(PolicyConfig::batch(0).validate().is_err());
        assert!(PolicyConfig::sync_single()
            .with_checkpoints(0)
            .validate()
            .is_err());
    }

    #[test]
    fn dwell_normalisations() {
        let DwellModel::Weibull { scale, .. } = DwellModel::weibull_with_mean(0.5, 10.0) else {
            unreachable!()
        };
        assert!((scale - 5.0).abs() < 1e-9);
        let DwellModel::Weibull { scale, .. } = DwellModel::weibull_with_median(1.0, 10.0) else {
            unreachable!()
        };
        assert!((scale - 10.0 / std::f64::consts::LN_2).abs() < 1e-9);
        assert!(DwellModel::Weibull { shape: 0.0, scale: 1.0 }.validate().is_err());
        assert!(DwellModel::Weibull { shape: 1.0, scale: -1.0 }.validate().is_err());
    }

    #[test]
    fn default_experiment_is_valid_and_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.mean_task_seconds() - 3.75).abs() < 1e-12);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "kernel_id = \"mandelbrot\"\ntotal_tasks = 30\n[dwell_model]\nkind = \"weibull\"\nshape = 0.5\nscale = 3.0\n",
        )
        .unwrap();
        assert_eq!(cfg.total_tasks, 30);
        assert_eq!(cfg.worker_slots, DEFAULT_WORKER_SLOTS);
        assert_eq!(cfg.dwell_model, DwellModel::Weibull { shape: 0.5, scale: 3.0 });
        assert!(ExperimentConfig::from_toml("total_tasks = 0").is_err());
        assert!(ExperimentConfig::from_toml("nonsense = 1").is_err());
    }

    #[test]
    fn transport_parses_aliases() {
        assert_eq!("ws".parse::<Transport>().unwrap(), Transport::Stream);
        assert_eq!(
            "request-response".parse::<Transport>().unwrap(),
            Transport::RequestResponse
        );
        assert!("carrier-pigeon".parse::<Transport>().is_err());
    }
}
