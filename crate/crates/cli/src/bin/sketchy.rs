use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use lots_cli::dataset::{run_build, run_fixture, BuildArgs, FixtureArgs};

#[derive(Parser)]
#[command(name = "sketchy", version, about = "Build paired sketch and description datasets from segmentation annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset from annotations and source images.
    Build(BuildArgs),
    /// Write synthetic annotations and images for smoke tests.
    Fixture(FixtureArgs),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build(a) => {
            let report = run_build(&a)?;
            println!("{}", serde_json::to_string_pretty(&report.stats)?);
        }
        Command::Fixture(a) => run_fixture(&a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    lots_cli::init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
