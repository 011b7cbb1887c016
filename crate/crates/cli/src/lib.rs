//! The `actmad` experiment harness: train a source model, record its activation
//! statistics, and run single-shift, cycle and ablation experiments from one
//! JSON config.

pub mod commands;
pub mod config;
pub mod report;

use std::io;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("cannot read config {}: {source}", path.display())]
    ConfigFile { path: PathBuf, source: io::Error },

    #[error("bad --set override: {0}")]
    Override(String),

    #[error("{0}")]
    Usage(String),

    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: io::Error },
}

#[derive(Debug, Parser)]
#[command(
    name = "actmad",
    version,
    about = "Test-time adaptation experiments by activation matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Train,
    Stats,
    Adapt,
    Cycle,
    Ablate,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path; `<out>/model.ckpt` when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Statistics path; `<out>/stats.bin` when absent.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model and write its checkpoint.
    Train(RunArgs),
    /// Record training-set activation statistics of a checkpoint.
    Stats(RunArgs),
    /// Adapt from the source model on each configured corruption.
    Adapt(RunArgs),
    /// Adapt continuously over the configured segment schedule.
    Cycle(RunArgs),
    /// Run the ablation variants and the batch-size sweep.
    Ablate(RunArgs),
}

impl Command {
    pub fn parts(&self) -> (CommandKind, &RunArgs) {
        match self {
            Command::Train(a) => (CommandKind::Train, a),
            Command::Stats(a) => (CommandKind::Stats, a),
            Command::Adapt(a) => (CommandKind::Adapt, a),
            Command::Cycle(a) => (CommandKind::Cycle, a),
            Command::Ablate(a) => (CommandKind::Ablate, a),
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Process exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<actmad_core::Error>() {
            use actmad_core::Error as E;
            return match e {
                E::NonFinite(_) => EXIT_NUMERICAL,
                E::Io(_) | E::Format(_) | E::UnexpectedEof(_) | E::Invariant(_) => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Output { .. } => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<csv::Error>().is_some()
            || cause.downcast_ref::<io::Error>().is_some()
        {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

/// Loads the config named by `args` and runs one subcommand.
pub fn run(kind: CommandKind, args: &RunArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    let paths = commands::Paths::resolve(&cfg, args);
    let pool = commands::thread_pool()?;
    pool.install(|| match kind {
        CommandKind::Train => commands::train(&cfg, &paths).map(drop),
        CommandKind::Stats => commands::stats(&cfg, &paths).map(drop),
        CommandKind::Adapt => commands::adapt(&cfg, &paths).map(drop),
        CommandKind::Cycle => commands::cycle(&cfg, &paths).map(drop),
        CommandKind::Ablate => commands::ablate(&cfg, &paths).map(drop),
    })
}
