//! Command-line orchestration of the sliceworld pipeline: data generation,
//! both training stages, the evaluation battery and log-only reporting.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::Parser;

pub use commands::{run, run_in, Command};
pub use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "sliceworld", version, about = "Factor-aware CT slice world model pipeline")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set pretrain.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output root; defaults to `$SLICEWORLD_OUT`, then `runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Cli {
    /// The run config with command-line flags applied last.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(j) = self.jobs {
            sets.push(format!("jobs={j}"));
        }
        RunConfig::resolve(self.config.as_deref(), &sets)
    }

    pub fn out_root(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.out.clone())
            .or_else(|| std::env::var_os("SLICEWORLD_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

/// Exit code and error category for a failed command.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return (2, "usage");
        }
        if let Some(e) = cause.downcast_ref::<sliceworld::Error>() {
            return match e {
                sliceworld::Error::Checkpoint(_) => (3, "version"),
                sliceworld::Error::Validation(_) | sliceworld::Error::TooShort { .. } => (4, "validation"),
                sliceworld::Error::NonFinite { .. } => (5, "non_finite"),
                _ => (1, "runtime"),
            };
        }
    }
    (1, "runtime")
}
