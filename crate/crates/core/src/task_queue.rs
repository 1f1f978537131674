//! In-memory task store.
//!
//! Dispatch never leases a task: `take_next` moves each handed-out task from
//! the head to the tail of the queue, so a task whose session vanished is
//! simply handed out again when the rotation comes back round. Duplicate
//! work that this causes is resolved at completion time, where only the
//! first final result is accepted.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::domain::{CheckpointRecord, Payload, Task, TaskId, TaskStatus};
use crate::error::QueueError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartialOutcome {
    Applied,
    Stale,
    AlreadyComplete,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Completion {
    /// First final result for this task. Carries the task as it left the
    /// queue so the caller can forward the payload upstream.
    Accepted(Task),
    Duplicate,
}

#[derive(Debug, Default)]
pub struct TaskQueue {
    order: VecDeque<TaskId>,
    tasks: HashMap<TaskId, Task>,
    completed: HashSet<TaskId>,
}

impl TaskQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, task: Task) -> Result<(), QueueError> {
        let id = task.task_id;
        if self.tasks.contains_key(&id) || self.completed.contains(&id) {
            return Err(QueueError::DuplicateTaskId(id));
        }
        if task.status != TaskStatus::Queued {
            return Err(QueueError::NotQueued(id));
        }
        self.order.push_back(id);
        self.tasks.insert(id, task);
        Ok(())
    }

    /// Hands out up to `n` tasks from the head, rotating each to the tail.
    /// A task is returned at most once per call.
    pub fn take_next(&mut self, n: usize) -> Vec<Task> {
        let count = n.min(self.order.len());
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let id = self.order.pop_front().expect("count bounded by len");
            self.order.push_back(id);
            let task = self.tasks.get_mut(&id).expect("queued ids are indexed");
            task.dispatch_count += 1;
            out.push(task.clone());
        }
        out
    }

    pub fn apply_partial(
        &mut self,
        id: TaskId,
        checkpoint: CheckpointRecord,
    ) -> Result<PartialOutcome, QueueError> {
        if self.completed.contains(&id) {
            return Ok(PartialOutcome::AlreadyComplete);
        }
        let task = self.tasks.get_mut(&id).ok_or(QueueError::UnknownTask(id))?;
        if checkpoint.sequence <= task.checkpoint_sequence() {
            return Ok(PartialOutcome::Stale);
        }
        merge_into(&mut task.payload, &checkpoint.partial_payload);
        task.checkpoint = Some(checkpoint);
        Ok(PartialOutcome::Applied)
    }

    pub fn complete(
        &mut self,
        id: TaskId,
        final_payload: Payload,
        final_sequence: u64,
    ) -> Result<Completion, QueueError> {
        if self.completed.contains(&id) {
            return Ok(Completion::Duplicate);
        }
        let mut task = self.tasks.remove(&id).ok_or(QueueError::UnknownTask(id))?;
        self.order.retain(|t| *t != id);
        self.completed.insert(id);
        task.payload = final_payload;
        task.status = TaskStatus::Completed;
        if let Some(cp) = task.checkpoint.as_mut() {
            cp.sequence = cp.sequence.max(final_sequence);
        }
        Ok(Completion::Accepted(task))
    }

    pub fn drained(&self) -> bool {
        self.order.is_empty()
    }

    pub fn queued_len(&self) -> usize {
        self.order.len()
    }

    pub fn completed_len(&self) -> usize {
        self.completed.len()
    }

    pub fn is_known(&self, id: TaskId) -> bool {
        self.tasks.contains_key(&id) || self.completed.contains(&id)
    }

    pub fn is_completed(&self, id: TaskId) -> bool {
        self.completed.contains(&id)
    }

    /// Queued ids in dispatch order.
    pub fn queued_ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.order.iter().copied()
    }

    pub fn get(&self, id: TaskId) -> Option<&Task> {
        self.tasks.get(&id)
    }
}

/// Key-wise overwrite of `target` by `partial`.
pub fn merge_into(target: &mut Payload, partial: &Payload) {
    for (k, v) in partial {
        target.insert(k.clone(), v.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn task(id: u64) -> Task {
        Task::new(TaskId(id), "add", Payload::new())
    }

    fn ids(tasks: &[Task]) -> Vec<u64> {
        tasks.iter().map(|t| t.task_id.0).collect()
    }

    fn order(q: &TaskQueue) -> Vec<u64> {
        q.queued_ids().map(|t| t.0).collect()
    }

    fn cp(seq: u64, progress: u64) -> CheckpointRecord {
        let mut partial = Payload::new();
        partial.insert("done".into(), json!(progress));
        CheckpointRecord {
            sequence: seq,
            partial_payload: partial,
            progress_units: progress,
        }
    }

    #[test]
    fn enqueue_appends_fifo() {
        let mut q = TaskQueue::new();
        q.enqueue(task(1)).unwrap();
        assert_eq!(order(&q), vec![1]);
        q.enqueue(task(2)).unwrap();
        q.enqueue(task(3)).unwrap();
        assert_eq!(order(&q), vec![1, 2, 3]);
    }

    #[test]
    fn enqueue_rejects_duplicates_even_after_completion() {
        let mut q = TaskQueue::new();
        q.enqueue(task(1)).unwrap();
        assert!(matches!(
            q.enqueue(task(1)),
            Err(QueueError::DuplicateTaskId(TaskId(1)))
        ));
        q.complete(TaskId(1), Payload::new(), 1).unwrap();
        assert!(matches!(
            q.enqueue(task(1)),
            Err(QueueError::DuplicateTaskId(TaskId(1)))
        ));
    }

    #[test]
    fn take_next_rotates_head_to_tail() {
        let mut q = TaskQueue::new();
        for i in 1..=3 {
            q.enqueue(task(i)).unwrap();
        }
        let got = q.take_next(1);
        assert_eq!(ids(&got), vec![1]);
        assert_eq!(got[0].dispatch_count, 1);
        assert_eq!(order(&q), vec![2, 3, 1]);
    }

    #[test]
    fn singleton_rotation_is_identity() {
        let mut q = TaskQueue::new();
        q.enqueue(task(1)).unwrap();
        assert_eq!(ids(&q.take_next(3)), vec![1]);
        assert_eq!(order(&q), vec![1]);
    }

    #[test]
    fn batch_take_twice_redispatches_same_tasks() {
        let mut q = TaskQueue::new();
        q.enqueue(task(1)).unwrap();
        q.enqueue(task(2)).unwrap();
        assert_eq!(ids(&q.take_next(2)), vec![1, 2]);
        let again = q.take_next(2);
        assert_eq!(ids(&again), vec![1, 2]);
        assert!(again.iter().all(|t| t.dispatch_count == 2));
    }

    #[test]
    fn take_next_on_empty_is_empty() {
        let mut q = TaskQueue::new();
        assert!(q.take_next(4).is_empty());
    }

    #[test]
    fn partial_checkpoint_rules() {
        let mut q = TaskQueue::new();
        q.enqueue(task(1)).unwrap();
        assert_eq!(q.apply_partial(TaskId(1), cp(1, 10)).unwrap(), PartialOutcome::Applied);
        assert_eq!(q.apply_partial(TaskId(1), cp(2, 20)).unwrap(), PartialOutcome::Applied);
        // a slower browser reporting an older stage loses
        assert_eq!(q.apply_partial(TaskId(1), cp(1, 10)).unwrap(), PartialOutcome::Stale);
        assert_eq!(q.apply_partial(TaskId(1), cp(2, 20)).unwrap(), PartialOutcome::Stale);
        let t = q.get(TaskId(1)).unwrap();
        assert_eq!(t.checkpoint_sequence(), 2);
        assert_eq!(t.payload["done"], json!(20));
        // the snapshot handed out next carries the checkpoint
        let snap = q.take_next(1).pop().unwrap();
        assert_eq!(snap.checkpoint_progress(), 20);

        q.complete(TaskId(1), Payload::new(), 3).unwrap();
        assert_eq!(
            q.apply_partial(TaskId(1), cp(5, 50)).unwrap(),
            PartialOutcome::AlreadyComplete
        );
        assert!(matches!(
            q.apply_partial(TaskId(9), cp(1, 1)),
            Err(QueueError::UnknownTask(TaskId(9)))
        ));
    }

    #[test]
    fn completion_is_exactly_once() {
        let mut q = TaskQueue::new();
        q.enqueue(task(1)).unwrap();
        q.enqueue(task(2)).unwrap();
        let mut fin = Payload::new();
        fin.insert("result".into(), json!(5));
        match q.complete(TaskId(1), fin.clone(), 1).unwrap() {
            Completion::Accepted(t) => {
                assert_eq!(t.status, TaskStatus::Completed);
                assert_eq!(t.payload, fin);
            }
            Completion::Duplicate => panic!("first completion must be accepted"),
        }
        assert_eq!(q.complete(TaskId(1), fin, 1).unwrap(), Completion::Duplicate);
        assert_eq!(ids(&q.take_next(5)), vec![2]);
        assert!(matches!(
            q.complete(TaskId(7), Payload::new(), 1),
            Err(QueueError::UnknownTask(TaskId(7)))
        ));
    }

    #[test]
    fn drained_cases() {
        let mut q = TaskQueue::new();
        assert!(q.drained());
        q.enqueue(task(1)).unwrap();
        assert!(!q.drained());
        q.complete(TaskId(1), Payload::new(), 1).unwrap();
        assert!(q.drained());
        assert_eq!(q.completed_len(), 1);
    }
}
