//! `wfl`: completion-time experiments for federated learning over a shared
//! slotted uplink.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use config::ExperimentConfig;
use wfl_core::Protocol;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] wfl_core::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use wfl_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::NoConvergence { .. } | E::SingularRate { .. }) => 3,
            CliError::Core(E::SlotCapExceeded { .. }) => 4,
            CliError::Core(E::Io(_)) | CliError::Io(_) => 1,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Tdma,
    Ra,
}

#[derive(Debug, Parser)]
#[command(
    name = "wfl",
    version,
    about = "Completion time of federated learning over TDMA and random access"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in configuration: n20-p0.05, n20-p0.2 (default) or two-device.
    #[arg(long, global = true)]
    preset: Option<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for `<command>.csv` and its `.json` sidecar.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    trials: Option<u64>,

    #[arg(long, global = true, value_enum)]
    protocol: Option<ProtocolArg>,

    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Required iterations K(epsilon) for each target gap.
    Ktarget,
    /// Iteration and completion time of one allocation.
    Time,
    /// Step-wise or optimal batch allocation.
    Allocate,
    /// Expected completion time across candidate batch gaps.
    SweepDelta,
    /// Federated SGD loss trajectories against slots.
    Train,
    /// Slot-level trace of one iteration.
    Simulate,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset("n20-p0.2")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(trials) = cli.trials {
        cfg.trials = Some(trials);
    }
    if let Some(p) = cli.protocol {
        cfg.protocol = Some(match p {
            ProtocolArg::Tdma => Protocol::Tdma,
            ProtocolArg::Ra => Protocol::Ra,
        });
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let started = Instant::now();
    let cfg = load(cli)?;
    let report = match cli.command {
        Command::Ktarget => commands::ktarget(&cfg)?,
        Command::Time => commands::time(&cfg)?,
        Command::Allocate => commands::allocate(&cfg)?,
        Command::SweepDelta => commands::sweep_delta(&cfg)?,
        Command::Train => commands::train(&cfg)?,
        Command::Simulate => commands::simulate(&cfg)?,
    };
    if let Some(out) = &cli.out {
        output::write_files(&report, out, &cfg, started.elapsed())?;
    }
    output::render(&report, cli.format)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
