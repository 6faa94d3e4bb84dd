//! Batch experiment runner for the federated adversarial fine-tuning
//! simulator.
//!
//! Subcommands: `partition`, `phase1`, `phase2`, `evaluate`, `report`.
//! Every subcommand takes `--config PATH` plus optional `--seed`, `--out`,
//! and `--threads` overrides. Exit codes: 0 ok, 2 config error, 3 runtime
//! error, 4 I/O error.

mod commands;
mod config;
mod report;
mod schema;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<fatsim_core::Error> for CliError {
    fn from(e: fatsim_core::Error) -> Self {
        use fatsim_core::Error as E;
        match e {
            E::Io(err) => CliError::Io(err.to_string()),
            E::Config(_) | E::HyperparameterRange { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fatsim",
    version,
    about = "Personalized federated adversarial fine-tuning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client-parallel sections (0 = default).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the dataset and write per-client shards.
    Partition(Common),
    /// Pretrain the backbone and run federated adversarial rounds.
    Phase1(Common),
    /// Run gated layer-selection fine-tuning on each client.
    Phase2(Common),
    /// Evaluate checkpointed models on the local test shards.
    Evaluate(Common),
    /// Produce aggregate tables and plot data from a run directory.
    Report(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

type CommandFn = fn(&ExperimentConfig) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, action): (&Common, CommandFn) =
        match &cli.command {
            Command::Partition(c) => (c, commands::cmd_partition),
            Command::Phase1(c) => (c, commands::cmd_phase1),
            Command::Phase2(c) => (c, commands::cmd_phase2),
            Command::Evaluate(c) => (c, commands::cmd_evaluate),
            Command::Report(c) => (c, report::cmd_report),
        };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let threads = common.threads.unwrap_or(cfg.threads);
    if threads > 0 {
        // Ignored if a pool already exists (e.g. repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", cfg.out_dir.display())))?;
    action(&cfg)
}
