use volunteer_core::experiments;
use volunteer_core::kernels::{self, MandelbrotProblem};
use volunteer_core::metrics::{self, EventKind};
use volunteer_core::swarm_sim::{run_virtual, RunOutcome};
use volunteer_core::{DwellModel, ExperimentConfig, NetworkModel, PolicyConfig, Transport};

#[test]
fn constant_dwell_baseline() {
    let cfg = ExperimentConfig {
        execute_kernels: false,
        ..Default::default()
    };
    let out = run_virtual(&cfg).unwrap();
    assert_eq!(out.outcome, RunOutcome::Drained);
    let s = out.summary(&cfg);
    assert_eq!(s.completions, 720);
    assert_eq!(s.pushes, 720);
    assert_eq!(s.sessions, 24);
    assert_eq!(s.value_sessions, 24);
    assert_eq!(s.wasted_dispatches, 0);
    let ideal = 720.0 * cfg.mean_task_seconds() / 24.0;
    assert!(s.runtime > ideal && s.runtime < ideal * 1.05, "runtime {}", s.runtime);
}

#[test]
fn prefetch_on_an_instant_network_never_waits() {
    let cfg = ExperimentConfig {
        total_tasks: 200,
        task_size: 100,
        worker_slots: 6,
        policy: PolicyConfig::async_prefetch(4, 1),
        network: NetworkModel {
            latency: 0.0,
            bandwidth: f64::INFINITY,
            service_time: 0.0,
            service_per_byte: 0.0,
            client_init: 0.0,
        },
        ..Default::default()
    };
    let out = run_virtual(&cfg).unwrap();
    assert_eq!(out.outcome, RunOutcome::Drained);
    assert_eq!(metrics::total_downtime(&out.events), 0.0);
}

#[test]
fn mandelbrot_under_churn_matches_a_calm_run() {
    let mut cfg = ExperimentConfig {
        kernel_id: kernels::MANDELBROT.into(),
        total_tasks: 7,
        worker_slots: 4,
        mandelbrot: MandelbrotProblem::default().resized(40, 30),
        compute_scale: 0.01,
        ..Default::default()
    };
    let calm = run_virtual(&cfg).unwrap().source.mandelbrot_grid().unwrap();
    cfg.dwell_model = DwellModel::weibull_with_mean(0.5, 1.5);
    cfg.policy = PolicyConfig::sync_single().with_checkpoints(40);
    let out = run_virtual(&cfg).unwrap();
    assert_eq!(out.outcome, RunOutcome::Drained);
    assert!(out.summary(&cfg).non_value_sessions > 0);
    assert_eq!(out.source.mandelbrot_grid().unwrap(), calm);
}

#[test]
fn transports_agree_on_results_not_on_bytes() {
    let base = ExperimentConfig {
        total_tasks: 40,
        task_size: 500,
        worker_slots: 4,
        dwell_model: DwellModel::weibull_with_mean(0.75, 1.0),
        ..Default::default()
    };
    let rr = run_virtual(&base).unwrap();
    let st = run_virtual(&ExperimentConfig { transport: Transport::Stream, ..base.clone() }).unwrap();
    assert_eq!(rr.source.results(), st.source.results());
    let (a, b) = (rr.summary(&base), st.summary(&base));
    assert!(a.bytes_stream == 0 && a.bytes_request_response > 0);
    assert!(b.bytes_stream > 0);
    assert!(b.bytes_stream + b.bytes_request_response < a.bytes_request_response);
}

#[test]
fn a_slot_never_holds_two_live_sessions() {
    let cfg = ExperimentConfig {
        total_tasks: 60,
        task_size: 2000,
        worker_slots: 5,
        dwell_model: DwellModel::weibull_with_mean(0.5, 1.0),
        execute_kernels: false,
        ..Default::default()
    };
    let out = run_virtual(&cfg).unwrap();
    let mut open = 0i64;
    let mut peak = 0;
    for e in &out.events {
        match e.kind {
            EventKind::SessionOpen { .. } => open += 1,
            EventKind::SessionClose { .. } => open -= 1,
            _ => {}
        }
        peak = peak.max(open);
    }
    assert_eq!(peak, 5);
    assert_eq!(open, 0);
}

#[test]
fn wait_events_alternate_per_session() {
    let cfg = ExperimentConfig {
        total_tasks: 80,
        task_size: 300,
        worker_slots: 6,
        policy: PolicyConfig::batch(3),
        dwell_model: DwellModel::weibull_with_mean(0.75, 1.0),
        execute_kernels: false,
        ..Default::default()
    };
    let out = run_virtual(&cfg).unwrap();
    let mut waiting = std::collections::HashMap::new();
    let mut last_t = std::collections::HashMap::new();
    for e in &out.events {
        let Some(s) = e.session else { continue };
        let prev = last_t.insert(s, e.t).unwrap_or(0.0);
        assert!(e.t >= prev);
        match e.kind {
            EventKind::WaitStart => assert!(!waiting.insert(s, true).unwrap_or(false)),
            EventKind::WaitEnd => assert!(waiting.insert(s, false).unwrap_or(false)),
            _ => {}
        }
    }
}

#[test]
fn starvation_ends_at_the_cap() {
    let cfg = ExperimentConfig {
        total_tasks: 10,
        dwell_model: DwellModel::Weibull { shape: 4.0, scale: 0.05 },
        time_cap: 20.0,
        ..Default::default()
    };
    let out = run_virtual(&cfg).unwrap();
    assert_eq!(out.outcome, RunOutcome::TimeCap { remaining: 10 });
    let s = out.summary(&cfg);
    assert_eq!(s.completions, 0);
    assert_eq!(s.value_sessions, 0);
    assert!(out.require_drained().is_err());
}

#[test]
fn finer_tasks_mean_more_downtime() {
    let mut downtime = Vec::new();
    for size in [2000u64, 500, 125] {
        let cfg = experiments::with_task_size(
            ExperimentConfig {
                total_tasks: 100,
                task_size: 2000,
                worker_slots: 8,
                dwell_model: DwellModel::weibull_with_mean(0.5, 2.0),
                execute_kernels: false,
                ..Default::default()
            },
            size,
        );
        let runs = experiments::run_repeats(&cfg, 3).unwrap();
        downtime.push(experiments::summarise("g", &runs).1.downtime);
    }
    assert!(downtime.windows(2).all(|w| w[0] <= w[1]), "{downtime:?}");
}
