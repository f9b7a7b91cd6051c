use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use lots_cli::evaluate::{run_eval, EvalArgs};
use lots_cli::generate::{run_sample, SampleArgs};
use lots_cli::train::{run_train, TrainArgs};
use lots_core::config::LotsConfig;
use lots_studio::{ConfigOverrides, StudioConfig};

#[derive(Parser)]
#[command(name = "lots", version, about = "Train, sample and serve sketch-and-text conditioned diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditioning modules and write a checkpoint.
    Train(TrainArgs),
    /// Generate one image from a checkpoint and a pairs file.
    Sample(SampleArgs),
    /// Score generated images against references and/or summarize a human study.
    Eval(EvalArgs),
    /// Run the studio HTTP service.
    Serve(ServeArgs),
    /// Print the default training configuration as TOML.
    Config,
}

#[derive(Args)]
struct ServeArgs {
    /// Studio TOML file; LOTS_* environment variables and flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Checkpoint id to load at startup.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    default_alpha: Option<f64>,
    #[arg(long)]
    default_steps: Option<usize>,
}

fn serve(args: ServeArgs) -> Result<()> {
    let overrides = ConfigOverrides {
        host: args.host,
        port: args.port,
        data_dir: args.data_dir,
        checkpoint_dir: args.checkpoint_dir,
        checkpoint: args.checkpoint,
        dataset_dir: args.dataset_dir,
        workers: args.workers,
        queue_capacity: args.queue_capacity,
        max_pairs: args.max_pairs,
        canvas: args.canvas,
        default_alpha: args.default_alpha,
        default_steps: args.default_steps,
    };
    let cfg = StudioConfig::resolve(args.config.as_deref(), &overrides)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(lots_studio::serve(cfg))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let summary = run_train(&a)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Sample(a) => {
            let prov = run_sample(&a)?;
            println!("{}", serde_json::to_string_pretty(&prov)?);
        }
        Command::Eval(a) => {
            run_eval(&a)?;
        }
        Command::Serve(a) => serve(a)?,
        Command::Config => print!("{}", LotsConfig::default().to_toml_string()?),
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
