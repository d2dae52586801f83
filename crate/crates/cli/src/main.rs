//! `scalar-ebm`: train, sample, stop-scan, compose, ood and diagnose from a
//! single JSON config.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "scalar-ebm", version, about = "Scalar energy models: training, sampling and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Benchmark preset (overrides the config preset).
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Fit a scalar network to a KDE target by score matching.
    Train,
    /// Run the Langevin or deterministic sampler and record snapshots.
    Sample,
    /// Run both samplers from one initialization and report stopping times.
    StopScan,
    /// Sample a composition of trained energies.
    Compose,
    /// Score in- and out-of-distribution points and report AUROCs.
    Ood,
    /// Residual sign scan, curl audit and Hessian probe of an energy.
    Diagnose,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sample => "sample",
            Command::StopScan => "stop-scan",
            Command::Compose => "compose",
            Command::Ood => "ood",
            Command::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(scalar_ebm::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<scalar_ebm::Error> for CliError {
    fn from(e: scalar_ebm::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 for bad input, 3 for numerical aborts, 1 otherwise.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(
                scalar_ebm::Error::InvalidArgument(_)
                | scalar_ebm::Error::DimensionMismatch { .. }
                | scalar_ebm::Error::Format(_)
                | scalar_ebm::Error::Json(_)
                | scalar_ebm::Error::Csv(_),
            ) => 2,
            _ => 1,
        }
    }
}

fn execute(cli: &Cli) -> Result<PathBuf, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.preset.is_some() {
        cfg.preset = cli.preset.clone();
    }
    if cli.out.is_some() {
        cfg.output_dir = cli.out.clone();
    }
    let name = cli.command.name();
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(format!("run-{name}")));
    cfg.output_dir = Some(out.clone());
    let ctx = run::RunContext::create(&cfg, out)?;
    match cli.command {
        Command::Train => commands::train(&cfg, &ctx)?,
        Command::Sample => commands::sample(&cfg, &ctx)?,
        Command::StopScan => commands::stop_scan(&cfg, &ctx)?,
        Command::Compose => commands::compose(&cfg, &ctx)?,
        Command::Ood => commands::ood(&cfg, &ctx)?,
        Command::Diagnose => commands::diagnose(&cfg, &ctx)?,
    }
    Ok(ctx.dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
