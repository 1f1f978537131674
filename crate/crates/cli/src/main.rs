mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use volunteer_core::domain::Transport;

use crate::commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "volunteer", version, about = "Browser-based volunteer computing: task manager and churn experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Discrete-event simulation in virtual time.
    Virtual,
    /// Real server and simulated browsers on the wall clock.
    Live,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the task manager.
    Serve {
        /// Server configuration (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Listen address; overrides the configuration file.
        #[arg(long, env = volunteer_server::config::LISTEN_ENV)]
        listen: Option<String>,
        /// With a benchmark source: stop once every result is in.
        #[arg(long)]
        exit_when_done: bool,
    },
    /// Run one experiment configuration, possibly repeated.
    Simulate {
        /// Experiment configuration (TOML); defaults to the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        repeats: u32,
        #[arg(long)]
        transport: Option<Transport>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Mode::Virtual)]
        mode: Mode,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Skip the per-run NDJSON event logs.
        #[arg(long)]
        no_events: bool,
    },
    /// Run every cell of a sweep matrix.
    Sweep {
        matrix: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Regenerate the CSV series behind the standard plots.
    Figures {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: u32,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Summarise an NDJSON event log.
    Report {
        events: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve {
            config,
            listen,
            exit_when_done,
        } => {
            init_logging("info");
            commands::serve(config.as_deref(), listen, exit_when_done)
        }
        Command::Simulate {
            config,
            repeats,
            transport,
            seed,
            mode,
            out,
            no_events,
        } => {
            init_logging("warn");
            commands::simulate(commands::SimulateArgs {
                config,
                repeats,
                transport,
                seed,
                live: mode == Mode::Live,
                out,
                events: !no_events,
            })
        }
        Command::Sweep { matrix, out, threads } => {
            init_logging("warn");
            commands::sweep(&matrix, &out, threads)
        }
        Command::Figures { out, repeats, threads } => {
            init_logging("warn");
            commands::figures(&out, repeats, threads)
        }
        Command::Report { events, out } => {
            init_logging("warn");
            commands::report(&events, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
