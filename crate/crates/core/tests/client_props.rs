use proptest::prelude::*;
use volunteer_core::client_runtime::{run_task, Action, ClientState};
use volunteer_core::kernels::{MandelbrotProblem, MandelbrotTask, MonteCarloTask};
use volunteer_core::protocol::{ClientMessage, TaskSnapshot};
use volunteer_core::{Payload, PolicyConfig, TaskId};

fn snap(id: u64) -> TaskSnapshot {
    TaskSnapshot {
        task_id: TaskId(id),
        kernel_id: "add".into(),
        payload: Payload::new(),
        checkpoint: None,
    }
}

fn policy() -> impl Strategy<Value = PolicyConfig> {
    prop_oneof![
        Just(PolicyConfig::sync_single()),
        (1u32..8).prop_map(PolicyConfig::batch),
        (2u32..10).prop_flat_map(|b| (Just(b), 0..b)).prop_map(|(b, t)| PolicyConfig::async_prefetch(b, t)),
    ]
}

proptest! {
    #[test]
    fn scheduling_invariants(policy in policy(), steps in prop::collection::vec((any::<bool>(), 0u32..12), 1..200)) {
        let mut c = ClientState::new(policy);
        let mut outstanding: Option<u32> = None;
        let mut next_id = 0;
        let bound = (policy.prefetch_threshold + policy.batch_size) as usize;
        for (deliver, k) in steps {
            if deliver {
                if let Some(n) = outstanding.take() {
                    let k = k.min(n);
                    c.on_tasks((0..k).map(|_| { next_id += 1; snap(next_id) }).collect());
                }
            } else {
                let before = c.buffered();
                match c.next_action() {
                    Action::RunTask(_) => prop_assert_eq!(c.buffered(), before - 1),
                    Action::Request(n) => {
                        prop_assert_eq!(before, 0);
                        prop_assert!(outstanding.is_none(), "second request while one is in flight");
                        prop_assert_eq!(n, policy.request_size());
                        outstanding = Some(n);
                    }
                    Action::RequestAsync(n) => {
                        prop_assert!(outstanding.is_none(), "prefetch while a request is in flight");
                        prop_assert_eq!(before, policy.prefetch_threshold as usize + 1);
                        prop_assert_eq!(n, policy.batch_size);
                        outstanding = Some(n);
                        // the task that takes the buffer down to the threshold runs next
                        let runs = matches!(c.next_action(), Action::RunTask(_));
                        prop_assert!(runs);
                        prop_assert_eq!(c.buffered(), policy.prefetch_threshold as usize);
                    }
                    Action::Idle => {
                        prop_assert_eq!(before, 0);
                        prop_assert!(outstanding.is_some());
                    }
                }
            }
            prop_assert!(c.buffered() <= bound);
            prop_assert_eq!(c.has_request_in_flight(), outstanding.is_some());
        }
    }

    #[test]
    fn checkpoint_sequences_strictly_increase(iterations in 1u64..400, every in 1u64..120) {
        let task = TaskSnapshot {
            task_id: TaskId(0),
            kernel_id: "monte-carlo".into(),
            payload: MonteCarloTask::new(iterations, 5).to_payload(),
            checkpoint: None,
        };
        let steps = run_task(task, &PolicyConfig::sync_single().with_checkpoints(every)).unwrap();
        let seqs: Vec<u64> = steps.iter().map(|s| match s.message {
            ClientMessage::Partial { sequence, .. } | ClientMessage::Final { sequence, .. } => sequence,
            _ => unreachable!(),
        }).collect();
        prop_assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
        prop_assert_eq!(steps.len() as u64, iterations.div_ceil(every));
        prop_assert_eq!(steps.iter().map(|s| s.units).sum::<u64>(), iterations);
        let last_is_final = matches!(steps.last().unwrap().message, ClientMessage::Final { .. });
        prop_assert!(last_is_final);
    }

    #[test]
    fn mandelbrot_checkpoints_compose(count in 1u64..60, every in 1u64..25) {
        let p = MandelbrotProblem::default().resized(12, 9);
        let t = MandelbrotTask {
            x0: p.x0, y0: p.y0, pixel_step: p.pixel_step, grid_width: p.width, grid_height: p.height,
            start_pixel: 17, pixel_count: count, max_iter: 200, counts: vec![], done_pixels: 0,
        };
        let snap = TaskSnapshot { task_id: TaskId(0), kernel_id: "mandelbrot".into(), payload: t.to_payload(), checkpoint: None };
        let whole = run_task(snap.clone(), &PolicyConfig::sync_single()).unwrap();
        let split = run_task(snap, &PolicyConfig::sync_single().with_checkpoints(every)).unwrap();
        let payload_of = |m: &ClientMessage| match m { ClientMessage::Final { payload, .. } => payload.clone(), _ => unreachable!() };
        prop_assert_eq!(payload_of(&whole.last().unwrap().message), payload_of(&split.last().unwrap().message));
    }
}
