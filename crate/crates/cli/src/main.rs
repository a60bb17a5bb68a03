mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{CurateArgs, Ctx, EmitArgs, EvaluateArgs, IngestArgs, InferArgs, SimulateArgs};
use config::RunConfig;

/// Model-collaboration pipeline for radiology report generation.
#[derive(Parser)]
#[command(name = "mocoll", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splits, few-shot sampling and the simulated world.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Log backend requests and responses (auth headers are never logged).
    #[arg(long, global = true)]
    trace: bool,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long, global = true)]
    resume: bool,
    /// Write into this directory instead of a hash-named one under output_dir.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, split and filter a raw manifest into a clean corpus.
    Ingest(IngestArgs),
    /// Generate reports through the question/answer loop.
    Infer(InferArgs),
    /// Generate training memories, select them and emit a dataset.
    Curate(CurateArgs),
    /// Convert selected examples into a fine-tuning dataset.
    Emit(EmitArgs),
    /// Score captions against references.
    Evaluate(EvaluateArgs),
    /// Run ablations in the simulated world.
    Simulate(SimulateArgs),
}

fn context(cli: &Cli) -> Result<Ctx> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.simulation.seed = seed;
    }
    if let Some(p) = cli.parallelism {
        config.parallelism = p;
    }
    config.validate()?;
    Ok(Ctx {
        config,
        resume: cli.resume,
        trace: cli.trace,
        run_dir: cli.run_dir.clone(),
    })
}

fn run(cli: &Cli) -> Result<PathBuf> {
    let ctx = context(cli)?;
    match &cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Infer(a) => commands::infer(&ctx, a),
        Command::Curate(a) => commands::curate_cmd(&ctx, a),
        Command::Emit(a) => commands::emit(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.trace { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(dir) => {
            println!("run_dir: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
