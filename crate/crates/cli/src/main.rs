//! `slope`: train ReLU classifiers, measure their slope, run the experiment
//! suite and self-check the implementation.

mod commands;
mod config;
mod fetch;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentFlags, SlopeFlags, TrainFlags, UsageError};

#[derive(Debug, Parser)]
#[command(name = "slope", version, about = "Slope of ReLU networks: training, measurement and experiments")]
struct Cli {
    /// Worker threads; 1 gives bitwise reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file whose keys override the built-in defaults; flags override both.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one network and record its slope every epoch.
    Train(TrainFlags),
    /// Slope of a saved network at dataset or CSV points.
    Slope(SlopeFlags),
    /// Run one of the experiments and write its CSV extracts.
    Experiment(ExperimentFlags),
    /// Property and oracle checks of the slope computation.
    Verify(config::VerifyFlags),
    /// Download and checksum dataset files into the data directory.
    FetchData(fetch::FetchFlags),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = commands::Context {
        config: cli.config,
        print_config: cli.print_config,
        argv: std::env::args().collect(),
    };
    match cli.command {
        Command::Train(f) => commands::train(&ctx, &f),
        Command::Slope(f) => commands::slope(&ctx, &f),
        Command::Experiment(f) => commands::experiment(&ctx, &f),
        Command::Verify(f) => commands::verify(&ctx, &f),
        Command::FetchData(f) => fetch::fetch_data(&ctx, &f),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
