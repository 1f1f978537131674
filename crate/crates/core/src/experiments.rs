//! Named experiment presets and the sweep matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client_runtime::run_task;
use crate::domain::{DwellModel, ExperimentConfig, PolicyConfig, SessionId, Transport, DESK_TASK_UNITS};
use crate::error::{ConfigError, SimError};
use crate::kernels::{self, Problem};
use crate::metrics::Summary;
use crate::protocol::{encode, AckStatus, ClientMessage, CodecConfig, ServerMessage, TaskSnapshot};
use crate::swarm_sim::{run_virtual, RunOutput};

/// Mean dwell shared by the three Weibull shapes in the reference runs.
pub const DEFAULT_MEAN_DWELL: f64 = 4.5;

pub const REFERENCE_SHAPES: [f64; 3] = [1.0, 0.75, 0.5];

/// Desk-scale task sizes standing in for 200M, 100M, 20M and 5M iterations.
pub const GRANULARITY_SIZES: [u64; 4] = [10_000, 5_000, 1_000, 250];

/// How the Weibull scale is derived when only the shape varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DwellNormalisation {
    /// All shapes share the mean dwell.
    #[default]
    SharedMean,
    /// All shapes share the median dwell.
    SharedMedian,
}

impl DwellNormalisation {
    pub fn model(self, shape: f64, dwell: f64) -> DwellModel {
        match self {
            DwellNormalisation::SharedMean => DwellModel::weibull_with_mean(shape, dwell),
            DwellNormalisation::SharedMedian => DwellModel::weibull_with_median(shape, dwell),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Reference Monte Carlo setup with Weibull churn of the given shape.
pub fn reference(shape: f64) -> ExperimentConfig {
    ExperimentConfig {
        dwell_model: DwellModel::weibull_with_mean(shape, DEFAULT_MEAN_DWELL),
        ..Default::default()
    }
}

/// Same total work split into tasks of `task_size` units.
pub fn with_task_size(mut cfg: ExperimentConfig, task_size: u64) -> ExperimentConfig {
    let total = cfg.task_size * cfg.total_tasks as u64;
    cfg.task_size = task_size;
    cfg.total_tasks = (total / task_size).max(1) as u32;
    cfg
}

pub fn value_session_sweep(norm: DwellNormalisation, dwell: f64) -> Vec<Variant> {
    REFERENCE_SHAPES
        .iter()
        .map(|&k| Variant {
            label: format!("k={k}"),
            config: ExperimentConfig {
                dwell_model: norm.model(k, dwell),
                ..Default::default()
            },
        })
        .collect()
}

pub fn granularity_sweep(shape: f64) -> Vec<Variant> {
    GRANULARITY_SIZES
        .iter()
        .map(|&size| Variant {
            label: format!("size={size}"),
            config: with_task_size(reference(shape), size),
        })
        .collect()
}

/// The four scheduling configurations compared at shape 0.5.
pub fn policy_sweep() -> Vec<Variant> {
    let q = DESK_TASK_UNITS / 4;
    [
        ("sync", q, PolicyConfig::sync_single()),
        ("checkpoint", DESK_TASK_UNITS, PolicyConfig::sync_single().with_checkpoints(q)),
        ("async-5-2", DESK_TASK_UNITS / 20, PolicyConfig::async_prefetch(5, 2)),
        ("async-10-3", DESK_TASK_UNITS / 40, PolicyConfig::async_prefetch(10, 3)),
    ]
    .into_iter()
    .map(|(label, size, policy)| Variant {
        label: label.to_string(),
        config: ExperimentConfig {
            policy,
            ..with_task_size(reference(0.5), size)
        },
    })
    .collect()
}

/// One message of the benchmark workloads with its encoded size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogueEntry {
    pub kernel_id: String,
    pub message: String,
    pub encoded_len: usize,
}

/// Every message type exchanged while running one task of each built-in
/// benchmark at its default size, encoded with `codec`.
pub fn message_catalogue(codec: &CodecConfig) -> Result<Vec<CatalogueEntry>, SimError> {
    let mut out = Vec::new();
    for kernel_id in [kernels::ADD, kernels::MONTE_CARLO, kernels::MANDELBROT] {
        let cfg = ExperimentConfig {
            kernel_id: kernel_id.to_string(),
            ..Default::default()
        };
        let problem = Problem::for_experiment(&cfg)?;
        let task = kernels::split(&problem, cfg.total_tasks, 0)?.remove(0);
        let snapshot = TaskSnapshot::from(task);
        let every = (snapshot_units(&snapshot)? / 4).max(1);
        let steps = run_task(snapshot.clone(), &PolicyConfig::sync_single().with_checkpoints(every))?;
        let mut push = |name: &str, len: usize| {
            out.push(CatalogueEntry {
                kernel_id: kernel_id.to_string(),
                message: name.to_string(),
                encoded_len: len,
            })
        };
        push("hello", encode(&ClientMessage::Hello { client_info: "catalogue".into() }, codec).len());
        push("request_tasks", encode(&ClientMessage::RequestTasks { count: 1 }, codec).len());
        push("welcome", encode(&ServerMessage::Welcome { session_id: SessionId(1) }, codec).len());
        push("tasks", encode(&ServerMessage::Tasks { tasks: vec![snapshot.clone()] }, codec).len());
        if let Some(p) = steps.iter().find(|s| matches!(s.message, ClientMessage::Partial { .. })) {
            push("partial", encode(&p.message, codec).len());
        }
        if let Some(f) = steps.last() {
            push("final", encode(&f.message, codec).len());
        }
        let ack = ServerMessage::Ack {
            task_id: snapshot.task_id,
            status: AckStatus::Accepted,
        };
        push("ack", encode(&ack, codec).len());
        push("drained", encode(&ServerMessage::Drained, codec).len());
    }
    Ok(out)
}

fn snapshot_units(t: &TaskSnapshot) -> Result<u64, SimError> {
    Ok(kernels::lookup(&t.kernel_id)?.total_units(&t.payload)?)
}

/// Seed of repeat `i` of a configuration.
pub fn repeat_seed(base: u64, i: u32) -> u64 {
    base.wrapping_add(i as u64)
}

/// Runs `repeats` virtual-time runs with consecutive seeds. Capped runs are
/// errors.
pub fn run_repeats(cfg: &ExperimentConfig, repeats: u32) -> Result<Vec<(ExperimentConfig, RunOutput)>, SimError> {
    (0..repeats.max(1))
        .map(|i| {
            let mut c = cfg.clone();
            c.rng_seed = repeat_seed(cfg.rng_seed, i);
            let out = run_virtual(&c)?.require_drained()?;
            Ok((c, out))
        })
        .collect()
}

/// Runs every variant `repeats` times on up to `threads` worker threads.
/// Results come back in variant order.
pub fn run_variants(
    variants: &[Variant],
    repeats: u32,
    threads: usize,
) -> Vec<Result<Vec<(ExperimentConfig, RunOutput)>, SimError>> {
    let jobs: Vec<(usize, ExperimentConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(v, variant)| {
            (0..repeats.max(1)).map(move |i| {
                let mut c = variant.config.clone();
                c.rng_seed = repeat_seed(variant.config.rng_seed, i);
                (v, c)
            })
        })
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let done = std::sync::Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((v, cfg)) = jobs.get(j) else { break };
                let r = run_virtual(cfg).and_then(RunOutput::require_drained);
                done.lock().unwrap_or_else(|p| p.into_inner()).push((j, *v, cfg.clone(), r));
            });
        }
    });
    let mut done = done.into_inner().unwrap_or_else(|p| p.into_inner());
    done.sort_by_key(|d| d.0);
    let mut out: Vec<Result<Vec<_>, SimError>> = variants.iter().map(|_| Ok(Vec::new())).collect();
    for (_, v, cfg, r) in done {
        match (&mut out[v], r) {
            (Ok(runs), Ok(o)) => runs.push((cfg, o)),
            (slot @ Ok(_), Err(e)) => *slot = Err(e),
            (Err(_), _) => {}
        }
    }
    out
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Per-run summaries followed by their mean.
pub fn summarise(label: &str, runs: &[(ExperimentConfig, RunOutput)]) -> (Vec<Summary>, Summary) {
    let rows: Vec<Summary> = runs
        .iter()
        .enumerate()
        .map(|(i, (c, o))| o.summary(c).with_label(format!("{label}#{i}")))
        .collect();
    let mean = Summary::mean(&rows)
        .expect("at least one run")
        .with_label(format!("{label}-mean"));
    (rows, mean)
}

/// Cross-product sweep description, read from TOML.
///
/// ```toml
/// repeats = 2
/// fixed_total_work = true
///
/// [base]
/// kernel_id = "monte-carlo"
/// # ... any experiment field
///
/// [axes]
/// task_size = [10000, 1000]
/// shape = [0.5, 1.0]
/// transport = ["request-response", "stream"]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepMatrix {
    #[serde(default = "one")]
    pub repeats: u32,
    /// Keep task_size × total_tasks fixed when task_size varies.
    #[serde(default = "yes")]
    pub fixed_total_work: bool,
    /// Dwell used with the `shape` axis.
    #[serde(default = "default_dwell")]
    pub dwell: f64,
    #[serde(default)]
    pub normalisation: DwellNormalisation,
    #[serde(default)]
    pub base: Option<ExperimentConfig>,
    #[serde(default)]
    pub axes: Axes,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    pub task_size: Option<Vec<u64>>,
    pub shape: Option<Vec<f64>>,
    pub transport: Option<Vec<Transport>>,
    pub policy: Option<Vec<NamedPolicy>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPolicy {
    pub name: String,
    #[serde(flatten)]
    pub policy: PolicyConfig,
    /// Task size to use with this policy, overriding the task_size axis.
    #[serde(default)]
    pub task_size: Option<u64>,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn default_dwell() -> f64 {
    DEFAULT_MEAN_DWELL
}

impl SweepMatrix {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let m: SweepMatrix = toml::from_str(text)?;
        if m.repeats == 0 {
            return Err(ConfigError::Invalid("repeats must be >= 1".into()));
        }
        if !(m.dwell.is_finite() && m.dwell > 0.0) {
            return Err(ConfigError::Invalid("dwell must be > 0".into()));
        }
        if let Some(b) = &m.base {
            b.validate()?;
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// No axis given, or any given axis empty: nothing to run.
    pub fn is_empty(&self) -> bool {
        let a = &self.axes;
        let lens = [
            a.task_size.as_ref().map(Vec::len),
            a.shape.as_ref().map(Vec::len),
            a.transport.as_ref().map(Vec::len),
            a.policy.as_ref().map(Vec::len),
        ];
        lens.iter().all(Option::is_none) || lens.contains(&Some(0))
    }

    /// Expands the cross product. Cells are ordered task_size, shape,
    /// transport, policy (last varies fastest).
    pub fn cells(&self) -> Result<Vec<Variant>, ConfigError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let base = self.base.clone().unwrap_or_default();
        let sizes: Vec<Option<u64>> = axis(&self.axes.task_size);
        let shapes: Vec<Option<f64>> = axis(&self.axes.shape);
        let transports: Vec<Option<Transport>> = axis(&self.axes.transport);
        let policies: Vec<Option<NamedPolicy>> = axis(&self.axes.policy);
        let mut out = Vec::new();
        for size in &sizes {
            for shape in &shapes {
                for transport in &transports {
                    for policy in &policies {
                        let mut cfg = base.clone();
                        let mut label = Vec::new();
                        let size = policy.as_ref().and_then(|p| p.task_size).or(*size);
                        if let Some(size) = size {
                            cfg = if self.fixed_total_work {
                                with_task_size(cfg, size)
                            } else {
                                ExperimentConfig { task_size: size, ..cfg }
                            };
                            label.push(format!("size={size}"));
                        }
                        if let Some(k) = shape {
                            cfg.dwell_model = self.normalisation.model(*k, self.dwell);
                            label.push(format!("k={k}"));
                        }
                        if let Some(t) = transport {
                            cfg.transport = *t;
                            label.push(t.to_string());
                        }
                        if let Some(p) = policy {
                            cfg.policy = p.policy;
                            label.push(p.name.clone());
                        }
                        cfg.validate()?;
                        out.push(Variant {
                            label: label.join(","),
                            config: cfg,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

fn axis<T: Clone>(values: &Option<Vec<T>>) -> Vec<Option<T>> {
    match values {
        Some(v) => v.iter().cloned().map(Some).collect(),
        None => vec![None],
    }
}
