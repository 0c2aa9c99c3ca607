use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lws::experiment::{run_experiment, ExperimentConfig};
use lws::report::emit_reports;
use lws::trainer::{Checkpoint, Mode, Trainer};
use lws::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ALL_FAILED: u8 = 3;

/// Multi-task training with learned weight sharing.
#[derive(Parser)]
#[command(name = "lws", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode for every repeat.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// lws, full or none; defaults to the config's mode.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Evaluate a checkpoint on the config's test sets.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every mode for every repeat and write a summary.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write CSVs and a results table for a finished experiment.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::AllRunsFailed(_) => EXIT_ALL_FAILED,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Csv(_) | Error::Report(_) => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

fn load_config(run: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(&run.config).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(seed) = run.seed {
        config.train.seed = seed;
    }
    if let Some(out) = &run.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { run, mode } => {
            let config = load_config(&run)?;
            let mode = mode.unwrap_or(config.train.mode);
            let summary = run_experiment(&config, &[mode])?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Compare { run } => {
            let config = load_config(&run)?;
            let summary = run_experiment(&config, &config.modes())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Evaluate { config, checkpoint } => {
            let config = ExperimentConfig::load(&config).map_err(|e| Error::Config(e.to_string()))?;
            let tasks = config.dataset.load()?;
            let trainer = Trainer::resume(Checkpoint::load(&checkpoint)?, &tasks)?;
            println!("{}", serde_json::to_string_pretty(&trainer.evaluate()?)?);
        }
        Command::Report { out } => {
            for path in emit_reports(&out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
