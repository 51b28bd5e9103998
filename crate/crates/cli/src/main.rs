//! `san <subcommand> <config> [key=value ...]`

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "san", version, about = "Set aggregation experiments and verification checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write metrics.csv, model.json and summary.txt.
    Train(Args),
    /// Evaluate a saved model.json on test data.
    Eval(Args),
    /// Compare backward-pass gradients with finite differences.
    Gradcheck(Args),
    /// Count embedding collisions over a universe of small integer sets.
    Injectivity(Args),
    /// Track smooth-max errors along an exponent schedule.
    Maxlimit(Args),
    /// Sample a ReLU translation profile and recover the set from it.
    Profile(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Flat key=value config file.
    config: PathBuf,
    /// key=value overrides applied after the file, last one wins.
    overrides: Vec<String>,
}

type Handler = fn(&RunConfig) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    let (args, handler): (&Args, Handler) = match &cli.command {
        Command::Train(a) => (a, commands::run_train),
        Command::Eval(a) => (a, commands::run_eval),
        Command::Gradcheck(a) => (a, commands::run_gradcheck),
        Command::Injectivity(a) => (a, commands::run_injectivity),
        Command::Maxlimit(a) => (a, commands::run_maxlimit),
        Command::Profile(a) => (a, commands::run_profile),
    };
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_overrides(&args.overrides)?;
    handler(&cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
