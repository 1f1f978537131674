//! Error types shared across the crate.

use thiserror::Error;

use crate::domain::TaskId;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("task {0} is already known to this manager")]
    DuplicateTaskId(TaskId),
    #[error("task {0} was never enqueued")]
    UnknownTask(TaskId),
    #[error("task {0} is not in the queued state")]
    NotQueued(TaskId),
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("task source unavailable: {0}")]
    Unavailable(String),
    #[error("result for task {task} dropped after {attempts} delivery attempts")]
    RetryExhausted { task: TaskId, attempts: u32 },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("payload field `{field}` missing or invalid")]
    BadPayload { field: &'static str },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("run aborted at t={at:.1}s after reaching the time cap with {remaining} tasks outstanding")]
    TimeCapReached { at: f64, remaining: usize },
}
