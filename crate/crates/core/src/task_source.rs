//! Boundary to the upstream system that owns tasks.
//!
//! The manager pulls batches from a [`TaskSource`] and pushes accepted
//! results back through a [`ResultForwarder`], which holds undeliverable
//! results in a bounded buffer and retries them at poll cadence.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::domain::{Payload, Task, TaskId};
use crate::error::{ConfigError, KernelError, SourceError};
use crate::kernels::{self, MandelGrid, MandelbrotTask, MonteCarloTask, Problem};

pub trait TaskSource: Send {
    /// Up to `max` tasks the manager has not seen before.
    fn pull_tasks(&mut self, max: usize) -> Result<Vec<Task>, SourceError>;

    fn push_result(&mut self, task_id: TaskId, payload: &Payload) -> Result<(), SourceError>;
}

impl<S: TaskSource + ?Sized> TaskSource for Box<S> {
    fn pull_tasks(&mut self, max: usize) -> Result<Vec<Task>, SourceError> {
        (**self).pull_tasks(max)
    }

    fn push_result(&mut self, task_id: TaskId, payload: &Payload) -> Result<(), SourceError> {
        (**self).push_result(task_id, payload)
    }
}

/// Where a remote source lives and how often to talk to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSourceDescriptor {
    pub endpoint: String,
    /// Seconds between polls.
    pub poll_interval: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl TaskSourceDescriptor {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.poll_interval.is_finite() && self.poll_interval > 0.0) {
            return Err(ConfigError::Invalid("poll_interval must be > 0".into()));
        }
        if self.endpoint.is_empty() {
            return Err(ConfigError::Invalid("task source endpoint is empty".into()));
        }
        Ok(())
    }
}

/// In-process source serving a split benchmark and collecting its results.
#[derive(Debug, Default)]
pub struct BenchmarkSource {
    pending: VecDeque<Task>,
    results: BTreeMap<TaskId, Payload>,
    total: usize,
}

impl BenchmarkSource {
    pub fn new(problem: &Problem, total_tasks: u32) -> Result<Self, KernelError> {
        Ok(Self::from_tasks(kernels::split(problem, total_tasks, 0)?))
    }

    pub fn from_tasks(tasks: Vec<Task>) -> Self {
        Self {
            total: tasks.len(),
            pending: tasks.into(),
            results: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn results(&self) -> &BTreeMap<TaskId, Payload> {
        &self.results
    }

    pub fn is_complete(&self) -> bool {
        self.pending.is_empty() && self.results.len() == self.total
    }

    pub fn pi_estimate(&self) -> Result<f64, KernelError> {
        let runs = self
            .results
            .values()
            .map(MonteCarloTask::from_payload)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(kernels::mc_reduce(&runs))
    }

    pub fn mandelbrot_grid(&self) -> Result<MandelGrid, KernelError> {
        let runs = self
            .results
            .values()
            .map(MandelbrotTask::from_payload)
            .collect::<Result<Vec<_>, _>>()?;
        kernels::assemble_mandelbrot(&runs)
    }
}

impl TaskSource for BenchmarkSource {
    fn pull_tasks(&mut self, max: usize) -> Result<Vec<Task>, SourceError> {
        let n = max.min(self.pending.len());
        Ok(self.pending.drain(..n).collect())
    }

    fn push_result(&mut self, task_id: TaskId, payload: &Payload) -> Result<(), SourceError> {
        if self.results.insert(task_id, payload.clone()).is_some() {
            warn!(%task_id, "task source received a second result");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PendingResult {
    task_id: TaskId,
    payload: Payload,
    attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered,
    Buffered,
}

#[derive(Debug, Default)]
pub struct RetryReport {
    pub delivered: Vec<TaskId>,
    /// Results given up on.
    pub exhausted: Vec<SourceError>,
}

/// Delivers accepted results upstream, buffering the ones that fail.
#[derive(Debug)]
pub struct ResultForwarder {
    pending: VecDeque<PendingResult>,
    max_attempts: u32,
    capacity: usize,
    delivered: u64,
    dropped: u64,
}

impl Default for ResultForwarder {
    fn default() -> Self {
        Self::new(10, 100_000)
    }
}

impl ResultForwarder {
    pub fn new(max_attempts: u32, capacity: usize) -> Self {
        Self {
            pending: VecDeque::new(),
            max_attempts: max_attempts.max(1),
            capacity: capacity.max(1),
            delivered: 0,
            dropped: 0,
        }
    }

    /// First delivery attempt for a freshly accepted result.
    pub fn submit(
        &mut self,
        source: &mut dyn TaskSource,
        task_id: TaskId,
        payload: Payload,
    ) -> Result<Delivery, SourceError> {
        match source.push_result(task_id, &payload) {
            Ok(()) => {
                self.delivered += 1;
                Ok(Delivery::Delivered)
            }
            Err(e) => {
                warn!(%task_id, error = %e, "result delivery failed, buffering");
                let mut evicted = Ok(Delivery::Buffered);
                if self.pending.len() == self.capacity {
                    let old = self.pending.pop_front().expect("capacity >= 1");
                    self.dropped += 1;
                    evicted = Err(SourceError::RetryExhausted {
                        task: old.task_id,
                        attempts: old.attempts,
                    });
                }
                self.pending.push_back(PendingResult {
                    task_id,
                    payload,
                    attempts: 1,
                });
                evicted.map(|_| Delivery::Buffered)
            }
        }
    }

    /// Retries every buffered result once.
    pub fn retry(&mut self, source: &mut dyn TaskSource) -> RetryReport {
        let mut delivered = Vec::new();
        let mut exhausted = Vec::new();
        let mut keep = VecDeque::with_capacity(self.pending.len());
        for mut p in self.pending.drain(..) {
            p.attempts += 1;
            match source.push_result(p.task_id, &p.payload) {
                Ok(()) => {
                    self.delivered += 1;
                    delivered.push(p.task_id);
                }
                Err(_) if p.attempts >= self.max_attempts => {
                    warn!(task_id = %p.task_id, attempts = p.attempts, "dropping undeliverable result");
                    self.dropped += 1;
                    exhausted.push(SourceError::RetryExhausted {
                        task: p.task_id,
                        attempts: p.attempts,
                    });
                }
                Err(_) => keep.push_back(p),
            }
        }
        self.pending = keep;
        RetryReport { delivered, exhausted }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    /// Fails the next `down_for` calls of each kind.
    struct Flaky {
        inner: BenchmarkSource,
        pull_failures: u32,
        push_failures: u32,
        push_attempts: u32,
    }

    impl TaskSource for Flaky {
        fn pull_tasks(&mut self, max: usize) -> Result<Vec<Task>, SourceError> {
            if self.pull_failures > 0 {
                self.pull_failures -= 1;
                return Err(SourceError::Unavailable("down".into()));
            }
            self.inner.pull_tasks(max)
        }

        fn push_result(&mut self, id: TaskId, p: &Payload) -> Result<(), SourceError> {
            self.push_attempts += 1;
            if self.push_failures > 0 {
                self.push_failures -= 1;
                return Err(SourceError::Unavailable("down".into()));
            }
            self.inner.push_result(id, p)
        }
    }

    fn mc_source(total: u32, size: u64) -> BenchmarkSource {
        BenchmarkSource::new(
            &Problem::MonteCarlo {
                total_iterations: total as u64 * size,
                seed_base: 9,
            },
            total,
        )
        .unwrap()
    }

    #[test]
    fn builtin_pull_then_exhaustion() {
        let mut s = mc_source(720, 200_000_000);
        let tasks = s.pull_tasks(1000).unwrap();
        assert_eq!(tasks.len(), 720);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.payload["iterations"], json!(200_000_000u64));
            assert_eq!(t.payload["seed"], json!(9 + i as u64));
        }
        let mut ids: Vec<_> = tasks.iter().map(|t| t.task_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 720);
        assert!(s.pull_tasks(1000).unwrap().is_empty());
    }

    #[test]
    fn pull_respects_max() {
        let mut s = mc_source(10, 5);
        assert_eq!(s.pull_tasks(3).unwrap().len(), 3);
        assert_eq!(s.pull_tasks(100).unwrap().len(), 7);
    }

    #[test]
    fn outage_reports_unavailable() {
        let mut s = Flaky {
            inner: mc_source(3, 5),
            pull_failures: 1,
            push_failures: 0,
            push_attempts: 0,
        };
        assert!(matches!(s.pull_tasks(3), Err(SourceError::Unavailable(_))));
        assert_eq!(s.pull_tasks(3).unwrap().len(), 3);
    }

    #[test]
    fn result_pushed_once() {
        let mut s = mc_source(1, 5);
        let mut f = ResultForwarder::default();
        let mut p = Payload::new();
        p.insert("hits".into(), json!(3));
        assert_eq!(f.submit(&mut s, TaskId(0), p.clone()).unwrap(), Delivery::Delivered);
        assert_eq!(s.results()[&TaskId(0)], p);
        assert_eq!(f.delivered(), 1);
        assert_eq!(f.pending(), 0);
    }

    #[test]
    fn delivered_on_third_attempt_after_two_failed_polls() {
        let mut s = Flaky {
            inner: mc_source(1, 5),
            pull_failures: 0,
            push_failures: 2,
            push_attempts: 0,
        };
        let mut f = ResultForwarder::new(5, 16);
        assert_eq!(f.submit(&mut s, TaskId(0), Payload::new()).unwrap(), Delivery::Buffered);
        assert!(f.retry(&mut s).exhausted.is_empty());
        assert_eq!(f.pending(), 1);
        assert!(f.retry(&mut s).exhausted.is_empty());
        assert_eq!(f.pending(), 0);
        assert_eq!(s.push_attempts, 3);
        assert_eq!(f.delivered(), 1);
        assert!(s.inner.results().contains_key(&TaskId(0)));
    }

    #[test]
    fn retry_exhaustion_drops_result() {
        let mut s = Flaky {
            inner: mc_source(1, 5),
            pull_failures: 0,
            push_failures: u32::MAX,
            push_attempts: 0,
        };
        let mut f = ResultForwarder::new(3, 16);
        f.submit(&mut s, TaskId(0), Payload::new()).unwrap();
        assert!(f.retry(&mut s).exhausted.is_empty());
        let gone = f.retry(&mut s).exhausted;
        assert!(matches!(
            gone.as_slice(),
            [SourceError::RetryExhausted { task: TaskId(0), attempts: 3 }]
        ));
        assert_eq!(f.pending(), 0);
        assert_eq!(f.dropped(), 1);
    }

    #[test]
    fn bounded_buffer_evicts_oldest() {
        let mut s = Flaky {
            inner: mc_source(1, 5),
            pull_failures: 0,
            push_failures: u32::MAX,
            push_attempts: 0,
        };
        let mut f = ResultForwarder::new(3, 2);
        f.submit(&mut s, TaskId(0), Payload::new()).unwrap();
        f.submit(&mut s, TaskId(1), Payload::new()).unwrap();
        assert!(matches!(
            f.submit(&mut s, TaskId(2), Payload::new()),
            Err(SourceError::RetryExhausted { task: TaskId(0), .. })
        ));
        assert_eq!(f.pending(), 2);
    }

    #[test]
    fn descriptor_validation() {
        let d = TaskSourceDescriptor {
            endpoint: "http://localhost:9000".into(),
            poll_interval: 0.0,
            token: None,
        };
        assert!(d.validate().is_err());
        assert!(TaskSourceDescriptor { poll_interval: 1.0, ..d }.validate().is_ok());
    }
}
