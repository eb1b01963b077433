//! `kneefuse` command-line interface.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use commands::*;

/// Exit status for bad invocations (BSD `EX_USAGE`).
const EXIT_USAGE: u8 = 64;
const EXIT_CONTRACT: u8 = 2;
const EXIT_IO: u8 = 1;

#[derive(Debug)]
pub enum CliError {
    Contract(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Contract(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<kneefuse::Error> for CliError {
    fn from(e: kneefuse::Error) -> Self {
        match e {
            kneefuse::Error::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Contract(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "kneefuse", version, about = "Multi-modal knee OA progression pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with images.
    Synth(SynthArgs),
    /// Fit a T2 map from a 4D multi-echo VOL1 file.
    FitT2(FitT2Args),
    /// Run a protocol's preprocessing chain over a cohort.
    Preprocess(PreprocessArgs),
    /// Cross-validated training with per-fold checkpoints.
    Train(TrainArgs),
    /// Score a trained run on its held-out subjects.
    Eval(EvalArgs),
    /// Clinical logistic-regression baseline.
    Baseline(BaselineArgs),
    /// Modality ablation and relative utilization rates.
    Ablate(AblateArgs),
    /// Rank fusion settings over a metric table.
    Rank(RankArgs),
    /// Per-subgroup metrics from per-horizon predictions.
    Subgroups(SubgroupsArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                0
            } else {
                EXIT_USAGE
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::FitT2(a) => fit_t2(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Ablate(a) => ablate(a),
        Command::Rank(a) => rank(a),
        Command::Subgroups(a) => subgroups(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Contract(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONTRACT)
        }
        Err(CliError::Io(m)) => {
            eprintln!("io error: {m}");
            ExitCode::from(EXIT_IO)
        }
    }
}
