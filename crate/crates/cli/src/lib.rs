//! Pipeline stages and the `gridsec` command line.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

pub mod commands;
pub mod manifest;
pub mod pipeline;

use clap::{Parser, Subcommand};
use gridsec::error::Error;
use std::ffi::OsString;
use std::process::ExitCode;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "gridsec", version, about = "Grid state estimation under false-data injection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic measurement corpus.
    GenData(commands::GenDataArgs),
    /// Train one estimator on a corpus.
    Train(commands::TrainArgs),
    /// Run an attack campaign against a trained estimator.
    Attack(commands::AttackArgs),
    /// Score estimators and campaigns on the test split.
    Evaluate(commands::EvaluateArgs),
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Islanded
                | Error::Diverged { .. }
                | Error::Unobservable(_)
                | Error::TrainingDiverged { .. }
                | Error::UndefinedMetric(_)
                | Error::Estimator(_)
                | Error::StaleCache(_) => EXIT_NUMERICAL,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Attack(a) => commands::attack(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// their parent.
pub fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
