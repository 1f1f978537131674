//! Core of a browser-based volunteer computing system: a rotating task
//! queue without leases, a small wire protocol, resumable kernels, the
//! worker-side scheduling runtime, a churn simulator and the metrics
//! pipeline that turns event logs into tables.

pub mod bundle;
pub mod client_runtime;
pub mod domain;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod manager;
pub mod metrics;
pub mod protocol;
pub mod stats;
pub mod swarm_sim;
pub mod task_queue;
pub mod task_source;

pub use domain::{
    CheckpointRecord, DwellModel, ExperimentConfig, NetworkModel, Payload, PolicyConfig, PolicyMode,
    SessionId, SessionRecord, Task, TaskId, TaskStatus, Transport,
};
pub use error::{ConfigError, KernelError, ProtocolError, QueueError, SimError, SourceError};
pub use manager::{Handled, Manager, ManagerConfig, ManagerStats, Outcome};
pub use task_queue::TaskQueue;
