//! `tscl` — pretrain, forecast, sweep, selftest, and synthetic-data export
//! for the teacher/student contrastive time-series pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{resolve_out_dir, SweepParam};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "tscl", version, about = "Self-supervised time-series representation learning and forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the teacher/student encoder pair; writes trace.csv,
    /// timings.csv, and checkpoint.json.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the ridge head on frozen representations and score every horizon;
    /// writes metrics_P*.json and summary.csv.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rerun the full pipeline over a list of values for one
    /// hyperparameter; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Which hyperparameter to sweep: "lambda" or "m".
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 0,0.25,0.5,0.9.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the numeric self-checks (gradient oracles, loss enumerations,
    /// solver and K-S oracles) and print one row per check.
    Selftest,
    /// Generate the configured synthetic dataset as an ETT-format CSV.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> tscl_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run() -> tscl_core::Result<()> {
    match Cli::parse().command {
        Command::Pretrain { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = resolve_out_dir(&cfg, out)?;
            commands::cmd_pretrain(&cfg, &out_dir)
        }
        Command::Forecast { config, checkpoint, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = resolve_out_dir(&cfg, out)?;
            commands::cmd_forecast(&cfg, &checkpoint, &out_dir)
        }
        Command::Sweep { config, param, values, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = resolve_out_dir(&cfg, out)?;
            let param: SweepParam = param.parse()?;
            commands::cmd_sweep(&cfg, param, &values, &out_dir)
        }
        Command::Selftest => commands::cmd_selftest(),
        Command::Synth { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = resolve_out_dir(&cfg, out)?;
            commands::cmd_synth(&cfg, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
