//! Worker-side scheduling state and task execution, shared by the simulated
//! and the live swarm.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::domain::{PolicyConfig, PolicyMode};
use crate::error::KernelError;
use crate::kernels::{self, Kernel};
use crate::protocol::{ClientMessage, TaskSnapshot};

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    RunTask(TaskSnapshot),
    /// Blocking request: the worker has nothing to do until it is answered.
    Request(u32),
    /// Prefetch issued while work remains in the buffer.
    RequestAsync(u32),
    /// Nothing to run and a request is already out (or the queue drained).
    Idle,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    policy: PolicyConfig,
    buffer: VecDeque<TaskSnapshot>,
    request_in_flight: bool,
    prefetch_in_flight: bool,
    drained: bool,
}

impl ClientState {
    pub fn new(policy: PolicyConfig) -> Self {
        Self {
            policy,
            buffer: VecDeque::new(),
            request_in_flight: false,
            prefetch_in_flight: false,
            drained: false,
        }
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    /// Decides the next step. Requests are issued at most one at a time.
    pub fn next_action(&mut self) -> Action {
        let in_flight = self.request_in_flight || self.prefetch_in_flight;
        if self.buffer.is_empty() {
            if in_flight || self.drained {
                return Action::Idle;
            }
            self.request_in_flight = true;
            return Action::Request(self.policy.request_size());
        }
        if self.policy.mode == PolicyMode::AsyncPrefetch
            && !in_flight
            && !self.drained
            && self.buffer.len() == self.policy.prefetch_threshold as usize + 1
        {
            self.prefetch_in_flight = true;
            return Action::RequestAsync(self.policy.batch_size);
        }
        let task = self.buffer.pop_front().expect("buffer is non-empty");
        Action::RunTask(task)
    }

    pub fn on_tasks(&mut self, tasks: Vec<TaskSnapshot>) {
        self.request_in_flight = false;
        self.prefetch_in_flight = false;
        self.buffer.extend(tasks);
    }

    /// The server had nothing to hand out.
    pub fn on_drained(&mut self) {
        self.request_in_flight = false;
        self.prefetch_in_flight = false;
        self.drained = true;
    }

    /// Allows requests again after a drained answer, e.g. after a back-off.
    pub fn resume(&mut self) {
        self.drained = false;
    }

    /// A request was lost (connection error); allow a new one.
    pub fn on_request_failed(&mut self) {
        self.request_in_flight = false;
        self.prefetch_in_flight = false;
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn has_request_in_flight(&self) -> bool {
        self.request_in_flight || self.prefetch_in_flight
    }

    pub fn is_drained(&self) -> bool {
        self.drained
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecStep {
    /// Work units computed in this step.
    pub units: u64,
    pub message: ClientMessage,
}

/// Runs one task from its recorded progress to completion, stopping at each
/// checkpoint boundary.
pub struct TaskExecution {
    task: TaskSnapshot,
    kernel: Arc<dyn Kernel>,
    checkpoint_every: Option<u64>,
    execute: bool,
    total: u64,
    done: u64,
    next_sequence: u64,
    finished: bool,
}

impl std::fmt::Debug for TaskExecution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskExecution")
            .field("task_id", &self.task.task_id)
            .field("done", &self.done)
            .field("total", &self.total)
            .finish()
    }
}

impl TaskExecution {
    pub fn start(task: TaskSnapshot, policy: &PolicyConfig, execute: bool) -> Result<Self, KernelError> {
        let kernel = kernels::lookup(&task.kernel_id)?;
        let total = kernel.total_units(&task.payload)?;
        let done = kernel.done_units(&task.payload)?.min(total);
        let next_sequence = task.checkpoint.as_ref().map_or(0, |c| c.sequence) + 1;
        Ok(Self {
            task,
            kernel,
            checkpoint_every: policy.checkpoint_every.filter(|&e| e > 0),
            execute,
            total,
            done,
            next_sequence,
            finished: false,
        })
    }

    pub fn task_id(&self) -> crate::domain::TaskId {
        self.task.task_id
    }

    pub fn done_units(&self) -> u64 {
        self.done
    }

    pub fn total_units(&self) -> u64 {
        self.total
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Computes up to the next checkpoint boundary (or the end) and returns
    /// the message to send. `None` once the final result has been produced.
    pub fn step(&mut self) -> Result<Option<ExecStep>, KernelError> {
        if self.finished {
            return Ok(None);
        }
        let target = match self.checkpoint_every {
            Some(every) => ((self.done / every + 1) * every).min(self.total),
            None => self.total,
        };
        if self.execute {
            self.kernel.advance(&mut self.task.payload, target)?;
        } else {
            self.kernel.skip(&mut self.task.payload, target)?;
        }
        let units = target - self.done;
        self.done = target;
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        let message = if self.done < self.total {
            ClientMessage::Partial {
                task_id: self.task.task_id,
                sequence,
                progress_units: self.done,
                partial_payload: self.kernel.checkpoint_fields(&self.task.payload),
            }
        } else {
            self.finished = true;
            ClientMessage::Final {
                task_id: self.task.task_id,
                sequence,
                payload: self.task.payload.clone(),
            }
        };
        Ok(Some(ExecStep { units, message }))
    }
}

/// Runs a task to completion and returns every message it produced.
pub fn run_task(task: TaskSnapshot, policy: &PolicyConfig) -> Result<Vec<ExecStep>, KernelError> {
    let mut exec = TaskExecution::start(task, policy, true)?;
    let mut steps = Vec::new();
    while let Some(s) = exec.step()? {
        steps.push(s);
    }
    Ok(steps)
}
