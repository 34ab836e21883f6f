//! Command-line front end for the nqs-core engine: training, exact
//! diagonalization, one-shot energy evaluation, sampling traces, and
//! kernel benchmarks, all driven by one declarative TOML config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.
//! `NQS_THREADS` caps the global thread pool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

/// A failed run: what to print and what to exit with.
pub struct Failure {
    pub exit: u8,
    pub error: anyhow::Error,
}

pub fn config_error(error: impl Into<anyhow::Error>) -> Failure {
    Failure { exit: EXIT_CONFIG, error: error.into() }
}

pub fn runtime_error(error: impl Into<anyhow::Error>) -> Failure {
    Failure { exit: EXIT_RUNTIME, error: error.into() }
}

fn config_message(msg: String) -> Failure {
    config_error(anyhow::anyhow!(msg))
}

#[derive(Parser)]
#[command(
    name = "nqs",
    version,
    about = "Neural-network quantum states for second-quantized molecular Hamiltonians"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ansatz by variational Monte Carlo.
    Train(CommonArgs),
    /// Exact ground state of the fixture by full diagonalization.
    Fci(CommonArgs),
    /// One-shot sampled energy of a checkpointed ansatz.
    Energy(CommonArgs),
    /// Sampling trace: per-layer unique counts and a leaf digest.
    Sample(CommonArgs),
    /// Local-energy kernel timings as CSV.
    Bench(CommonArgs),
}

/// Config file plus the keys it is most useful to override per run.
#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// FCIDUMP path (overrides system.fcidump).
    #[arg(long)]
    fcidump: Option<PathBuf>,
    /// Training iterations (overrides train.iterations).
    #[arg(long)]
    iterations: Option<u64>,
    /// Sample budget (overrides train.n_count).
    #[arg(long)]
    n_count: Option<u64>,
    /// Chunk threshold (overrides train.chunk_k).
    #[arg(long)]
    chunk_k: Option<usize>,
    /// Stream seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics stream path (overrides paths.metrics).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Checkpoint path (overrides paths.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Trainer checkpoint to continue from (overrides paths.resume).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Result destination; stdout when unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load_config(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(config_message)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.fcidump {
            cfg.system.fcidump = Some(path.clone());
        }
        if let Some(n) = self.iterations {
            cfg.train.iterations = n;
        }
        if let Some(n) = self.n_count {
            cfg.train.n_count = n;
        }
        if let Some(k) = self.chunk_k {
            cfg.train.chunk_k = k;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(path) = &self.metrics {
            cfg.paths.metrics = Some(path.clone());
        }
        if let Some(path) = &self.checkpoint {
            cfg.paths.checkpoint = Some(path.clone());
        }
        if let Some(path) = &self.resume {
            cfg.paths.resume = Some(path.clone());
        }
        Ok(cfg)
    }
}

fn cap_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("NQS_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_message(format!("NQS_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(runtime_error)
}

fn dispatch() -> Result<(), Failure> {
    cap_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => commands::cmd_train(&args.load_config()?),
        Command::Fci(args) => {
            let cfg = args.load_config()?;
            commands::cmd_fci(&cfg, args.out.as_deref())
        }
        Command::Energy(args) => {
            let cfg = args.load_config()?;
            commands::cmd_energy(&cfg, args.out.as_deref())
        }
        Command::Sample(args) => {
            let cfg = args.load_config()?;
            commands::cmd_sample(&cfg, args.out.as_deref())
        }
        Command::Bench(args) => {
            let cfg = args.load_config()?;
            commands::cmd_bench(&cfg, args.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.exit)
        }
    }
}
