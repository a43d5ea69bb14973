use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use wavegrad::{Error, ErrorCategory};

mod commands;
mod config;
mod output;

#[derive(Debug, Parser)]
#[command(
    name = "wavegrad",
    version,
    about = "Diffusion vocoder: train, synthesize, evaluate and tune schedules"
)]
struct Cli {
    /// Log filter, e.g. `warn` or `wavegrad=debug`; RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a run config; resumes from an existing checkpoint.
    Train(commands::train::Args),
    /// Synthesize a waveform from a mel matrix or from a WAV's ground-truth mel.
    Synth(commands::synth::Args),
    /// Rank short manual schedules by LS-MSE on a validation set.
    Sweep(commands::sweep::Args),
    /// Per-utterance LS-MSE, MCD and FFE between two WAV directories.
    Eval(commands::eval::Args),
    /// Tabulate a schedule and check it for likely sampling problems.
    InspectSchedule(commands::inspect::Args),
    /// Write the synthetic harmonic corpus as WAV files.
    MakeCorpus(commands::corpus::Args),
    /// Extract a mel matrix file from a WAV.
    ExtractMel(commands::mel::Args),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let category = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(Error::category)
        .unwrap_or(ErrorCategory::Data);
    match category {
        ErrorCategory::Usage => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Numerical => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => commands::train::run(a),
        Command::Synth(a) => commands::synth::run(a),
        Command::Sweep(a) => commands::sweep::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::InspectSchedule(a) => commands::inspect::run(a),
        Command::MakeCorpus(a) => commands::corpus::run(a),
        Command::ExtractMel(a) => commands::mel::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Shared `--checkpoint` resolution.
pub(crate) fn checkpoint_path(p: PathBuf) -> PathBuf {
    config::resolve(&p, config::CHECKPOINT_ROOT_ENV, std::path::Path::new("."))
}

/// Shared data-path resolution.
pub(crate) fn data_path(p: PathBuf) -> PathBuf {
    config::resolve(&p, config::DATA_ROOT_ENV, std::path::Path::new("."))
}
