use std::fs::OpenOptions;
use std::io::{BufReader, LineWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use tracing::warn;
use volunteer_core::domain::{ExperimentConfig, Transport};
use volunteer_core::error::{ConfigError, SimError};
use volunteer_core::experiments::{
    self, default_threads, granularity_sweep, message_catalogue, policy_sweep, repeat_seed, summarise,
    value_session_sweep, DwellNormalisation, SweepMatrix, Variant, DEFAULT_MEAN_DWELL,
};
use volunteer_core::kernels::{self, Problem};
use volunteer_core::metrics::{self, EventSink, Summary};
use volunteer_core::protocol::{wire_cost, CodecConfig, OverheadConfig};
use volunteer_core::swarm_sim::{RunOutcome, RunOutput};
use volunteer_core::task_source::{BenchmarkSource, TaskSource};
use volunteer_server::live::{run_live, LiveOptions};
use volunteer_server::{LiveError, ServerConfig, ServerError, SharedSource, SourceConfig};

use crate::output;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(SimError),
    #[error(transparent)]
    Server(ServerError),
    #[error(transparent)]
    Live(LiveError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => CliError::Config(c),
            other => CliError::Sim(other),
        }
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::Config(c) => CliError::Config(c),
            other => CliError::Server(other),
        }
    }
}

impl From<LiveError> for CliError {
    fn from(e: LiveError) -> Self {
        match e {
            LiveError::Config(c) | LiveError::Server(ServerError::Config(c)) => CliError::Config(c),
            other => CliError::Live(other),
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Failed(format!("cannot start the async runtime: {e}")))
}

pub fn serve(config: Option<&Path>, listen: Option<String>, exit_when_done: bool) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => ServerConfig::load(p)?,
        None => ServerConfig::default(),
    };
    if let Some(l) = listen {
        cfg.listen = l;
    }
    cfg.validate()?;
    let benchmark = match &cfg.source {
        SourceConfig::Benchmark(e) => {
            let problem = Problem::for_experiment(e).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let source = BenchmarkSource::new(&problem, e.total_tasks).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Some((SharedSource::new(source), e.kernel_id.clone()))
        }
        SourceConfig::Remote(_) => {
            if exit_when_done {
                warn!("--exit-when-done only applies to benchmark sources");
            }
            None
        }
    };
    let source: Box<dyn TaskSource> = match &benchmark {
        Some((s, _)) => Box::new(s.clone()),
        None => volunteer_server::build_source(&cfg.source)?,
    };
    let sink = match &cfg.event_log {
        Some(p) => {
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| CliError::io(p, e))?;
            EventSink::with_writer(Box::new(LineWriter::new(f)), false)
        }
        None => EventSink::with_writer(Box::new(std::io::sink()), false),
    };
    runtime()?.block_on(async move {
        let handle = volunteer_server::start(cfg, source, Arc::new(sink)).await?;
        println!("listening on {}", handle.base_url());
        let done = || benchmark.as_ref().is_some_and(|(s, _)| s.with(|s| s.is_complete()));
        loop {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => break,
                _ = tokio::time::sleep(Duration::from_millis(200)) => {
                    if exit_when_done && done() {
                        break;
                    }
                }
            }
        }
        handle.shutdown().await?;
        if let Some((s, kernel_id)) = &benchmark {
            s.with(|s| report_benchmark(s, kernel_id));
        }
        Ok(())
    })
}

fn report_benchmark(s: &BenchmarkSource, kernel_id: &str) {
    println!("{} of {} results delivered", s.results().len(), s.total());
    if !s.is_complete() {
        return;
    }
    match kernel_id {
        kernels::MONTE_CARLO => match s.pi_estimate() {
            Ok(pi) => println!("pi estimate {pi:.6}"),
            Err(e) => warn!(error = %e, "cannot reduce results"),
        },
        kernels::MANDELBROT => match s.mandelbrot_grid() {
            Ok(g) => println!("mandelbrot grid {}x{} assembled", g.width, g.height),
            Err(e) => warn!(error = %e, "cannot reduce results"),
        },
        _ => {}
    }
}

#[derive(Debug)]
pub struct SimulateArgs {
    pub config: Option<PathBuf>,
    pub repeats: u32,
    pub transport: Option<Transport>,
    pub seed: Option<u64>,
    pub live: bool,
    pub out: PathBuf,
    pub events: bool,
}

pub fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = args.transport {
        cfg.transport = t;
    }
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    if args.repeats == 0 {
        return Err(ConfigError::Invalid("--repeats must be >= 1".into()).into());
    }
    let (runs, capped) = if args.live {
        run_live_repeats(&cfg, args.repeats)?
    } else {
        let variant = Variant {
            label: "run".into(),
            config: cfg.clone(),
        };
        let runs = experiments::run_variants(&[variant], args.repeats, default_threads())
            .pop()
            .expect("one variant")?;
        (runs, 0)
    };
    let label = if args.live { "live" } else { "virtual" };
    let (mut rows, mean) = summarise(label, &runs);
    for r in &rows {
        println!("{}", output::describe(r));
    }
    if rows.len() > 1 {
        println!("{}", output::describe(&mean));
    }
    rows.push(mean);
    output::summaries(&args.out, "summary.csv", &rows)?;
    let mut hist = Vec::new();
    let mut pooled = Vec::new();
    for (i, (_, run)) in runs.iter().enumerate() {
        let records = metrics::session_records(&run.events);
        hist.push((format!("{label}#{i}"), metrics::classify_records(&records)));
        pooled.extend(records);
        if args.events {
            output::events(&args.out, &format!("run-{i}.ndjson"), &run.events)?;
        }
        output::sessions(&args.out, &format!("run-{i}.sessions.csv"), &run.events)?;
    }
    hist.push((format!("{label}-all"), metrics::classify_records(&pooled)));
    output::histogram(&args.out, "histogram.csv", &hist)?;
    if capped > 0 {
        return Err(CliError::Failed(format!("{capped} live run(s) hit the time cap")));
    }
    Ok(())
}

fn run_live_repeats(cfg: &ExperimentConfig, repeats: u32) -> Result<(Vec<(ExperimentConfig, RunOutput)>, u32), CliError> {
    let rt = runtime()?;
    let mut runs = Vec::new();
    let mut capped = 0;
    for i in 0..repeats {
        let mut c = cfg.clone();
        c.rng_seed = repeat_seed(cfg.rng_seed, i);
        let out = rt.block_on(run_live(&c, &LiveOptions::default()))?;
        if let RunOutcome::TimeCap { remaining } = out.run.outcome {
            warn!(run = i, remaining, "live run hit the time cap");
            capped += 1;
        }
        runs.push((c, out.run));
    }
    Ok((runs, capped))
}

fn run_and_tabulate(
    variants: &[Variant],
    repeats: u32,
    threads: usize,
) -> Result<(Vec<Summary>, Vec<Summary>, Vec<(String, metrics::SessionClassification)>), CliError> {
    let results = experiments::run_variants(variants, repeats, threads);
    let mut all = Vec::new();
    let mut means = Vec::new();
    let mut hist = Vec::new();
    for (v, r) in variants.iter().zip(results) {
        let runs = r?;
        let (rows, mean) = summarise(&v.label, &runs);
        println!("{}", output::describe(&mean));
        all.extend(rows);
        means.push(mean.with_label(v.label.clone()));
        let records: Vec<_> = runs
            .iter()
            .flat_map(|(_, o)| metrics::session_records(&o.events))
            .collect();
        hist.push((v.label.clone(), metrics::classify_records(&records)));
    }
    Ok((all, means, hist))
}

pub fn sweep(matrix: &Path, out: &Path, threads: Option<usize>) -> Result<(), CliError> {
    let m = SweepMatrix::load(matrix)?;
    let cells = m.cells()?;
    if cells.is_empty() {
        println!("{}: no cells to run", matrix.display());
        return Ok(());
    }
    let (all, means, hist) = run_and_tabulate(&cells, m.repeats, threads.unwrap_or_else(default_threads))?;
    output::summaries(out, "runs.csv", &all)?;
    output::summaries(out, "summary.csv", &means)?;
    output::histogram(out, "histogram.csv", &hist)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TransportRow {
    kernel: String,
    message: String,
    encoded_bytes: usize,
    request_response_bytes: u64,
    stream_bytes: u64,
}

pub fn figures(out: &Path, repeats: u32, threads: Option<usize>) -> Result<(), CliError> {
    if repeats == 0 {
        return Err(ConfigError::Invalid("--repeats must be >= 1".into()).into());
    }
    let threads = threads.unwrap_or_else(default_threads);
    let mut churn = value_session_sweep(DwellNormalisation::SharedMean, DEFAULT_MEAN_DWELL);
    churn.extend(
        value_session_sweep(DwellNormalisation::SharedMedian, DEFAULT_MEAN_DWELL)
            .into_iter()
            .map(|v| Variant {
                label: format!("median,{}", v.label),
                ..v
            }),
    );
    let sets = [
        ("value_sessions", churn),
        ("granularity", granularity_sweep(0.5)),
        ("policies", policy_sweep()),
    ];
    for (name, variants) in &sets {
        println!("# {name}");
        let (all, means, hist) = run_and_tabulate(variants, repeats, threads)?;
        output::summaries(out, &format!("{name}.csv"), &means)?;
        output::summaries(out, &format!("{name}_runs.csv"), &all)?;
        output::histogram(out, &format!("{name}_tasks_per_session.csv"), &hist)?;
    }
    let overhead = OverheadConfig::default();
    let mut w = csv::Writer::from_writer(output::create(out, "transport.csv")?);
    for e in message_catalogue(&CodecConfig::default())? {
        w.serialize(TransportRow {
            request_response_bytes: wire_cost(e.encoded_len, Transport::RequestResponse, &overhead),
            stream_bytes: wire_cost(e.encoded_len, Transport::Stream, &overhead),
            kernel: e.kernel_id,
            message: e.message,
            encoded_bytes: e.encoded_len,
        })?;
    }
    w.flush().map_err(|e| CliError::io(&out.join("transport.csv"), e))?;
    Ok(())
}

pub fn report(events: &Path, out: &Path) -> Result<(), CliError> {
    let f = std::fs::File::open(events).map_err(|e| CliError::io(events, e))?;
    let log = metrics::read_ndjson(BufReader::new(f)).map_err(|e| CliError::io(events, e))?;
    if log.is_empty() {
        return Err(CliError::Failed(format!("{}: no events", events.display())));
    }
    let label = events
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("events")
        .to_string();
    let summary = metrics::experiment_summary(&log, None).with_label(label.clone());
    println!("{}", output::describe(&summary));
    output::summaries(out, "summary.csv", &[summary])?;
    output::sessions(out, "sessions.csv", &log)?;
    output::histogram(out, "histogram.csv", &[(label, metrics::classify_sessions(&log))])?;
    Ok(())
}
