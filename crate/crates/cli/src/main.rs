//! `trackcast`: generate synthetic clips, run the data pipeline, train the
//! track diffusion model, sample forecasts and evaluate them.

mod commands;
mod data;
mod error;
mod files;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, GenArgs, PipelineArgs, SampleArgs, StatsArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "trackcast", version, about = "Animal point-track forecasting with track diffusion")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Stabilize and normalize raw clips.
    Pipeline(PipelineArgs),
    /// Displacement statistics with log-normal and power-law fits.
    Stats(StatsArgs),
    /// Train the model.
    Train(TrainArgs),
    /// Sample forecasts from a checkpoint.
    Sample(SampleArgs),
    /// Score baselines and model forecasts.
    Eval(EvalArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Pipeline(_) => "pipeline",
            Command::Stats(_) => "stats",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = (|| {
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(error::CliError::config("--threads must be positive"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| error::CliError::config(e.to_string()))?;
        }
        match &cli.command {
            Command::Gen(a) => commands::gen(a, cli.verbose),
            Command::Pipeline(a) => commands::pipeline(a, cli.verbose),
            Command::Stats(a) => commands::stats(a, cli.verbose),
            Command::Train(a) => commands::train(a, cli.verbose),
            Command::Sample(a) => commands::sample(a, cli.verbose),
            Command::Eval(a) => commands::eval(a, cli.verbose),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record(name));
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
