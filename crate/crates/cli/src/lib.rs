//! Command-line front end: `ingest`, `train`, `backtest` and `report`, all
//! driven by one TOML experiment file.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Baseline;
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tradelab", version, about = "Train and backtest trading agents")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    pub config: PathBuf,

    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the data and write a summary.
    Ingest,
    /// Train the configured mode and save checkpoints.
    Train,
    /// Evaluate checkpoints and baselines on the test partition.
    Backtest {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "baseline", value_enum)]
        baselines: Vec<Baseline>,
    },
    /// Collect training and backtest results into report.md.
    Report,
}

/// Loads the config, applies overrides and runs one command. Returns the
/// line printed on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = std::path::absolute(out).map_err(|e| CliError::io(out, e))?;
    }
    let json = |v: serde_json::Value| v.to_string();
    Ok(match &cli.command {
        Command::Ingest => {
            let s = commands::ingest(&cfg)?;
            for w in &s.warnings {
                log::warn!("{w}");
            }
            json(serde_json::json!({ "candles": s.candles, "split": s.split, "warnings": s.warnings }))
        }
        Command::Train => {
            let s = commands::train(&cfg)?;
            for w in &s.warnings {
                log::warn!("{w}");
            }
            json(serde_json::json!({ "mode": s.mode, "checkpoints": s.checkpoints, "warnings": s.warnings }))
        }
        Command::Backtest { checkpoints, baselines } => commands::backtest(&cfg, checkpoints, baselines)?.table,
        Command::Report => commands::report(&cfg)?,
    })
}
