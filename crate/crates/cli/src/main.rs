use std::path::PathBuf;
use std::process::ExitCode;

use caseprompt::commands::{
    cmd_index, cmd_knn, cmd_report, cmd_run, cmd_sample, cmd_simulate, cmd_verify,
};
use caseprompt::{CliError, ExperimentConfig};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "caseprompt",
    version,
    about = "Retrieval-augmented charge prediction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set generation.n_samples=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the train/validation/test splits.
    Sample(Common),
    /// Build or reuse the BM25 index over the training split.
    Index(Common),
    /// Run the question-form × shots matrix.
    Run(Common),
    /// Sweep simulated retrievers and demonstration patterns.
    Simulate(Common),
    /// Report Precision@1 and the tuned kNN baseline.
    Knn(Common),
    /// Ask one yes/no question per candidate charge.
    Verify(Common),
    /// Rewrite report CSVs from stored results.
    Report(Common),
}

fn emit<T: Serialize>(value: T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&value).map_err(caseprompt_core::Error::from)?;
    println!("{text}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let load = |c: &Common| ExperimentConfig::load(&c.config, &c.overrides);
    match cli.command {
        Command::Sample(c) => emit(cmd_sample(load(&c)?)?),
        Command::Index(c) => emit(cmd_index(load(&c)?)?),
        Command::Run(c) => emit(cmd_run(load(&c)?)?),
        Command::Simulate(c) => emit(cmd_simulate(load(&c)?)?),
        Command::Knn(c) => emit(cmd_knn(load(&c)?)?),
        Command::Verify(c) => emit(cmd_verify(load(&c)?)?),
        Command::Report(c) => emit(cmd_report(load(&c)?)?),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::to_string(&e.record()).unwrap_or_else(|_| {
                format!("{{\"status\":\"error\",\"message\":{:?}}}", e.to_string())
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
