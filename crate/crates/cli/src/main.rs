//! `pathaug`: reproducible batch workflows for synthetic-data augmented
//! pathloss modelling.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "pathaug",
    version,
    about = "Simulation-augmented pathloss datasets and models"
)]
struct Cli {
    /// Directory receiving all outputs and the run manifest.
    #[arg(long, global = true, env = "PATHAUG_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true, env = "PATHAUG_THREADS")]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic DSM/DHM pair.
    TerrainGen(commands::TerrainGenArgs),
    /// Simulate pathloss over a receiver grid.
    Simulate(commands::SimulateArgs),
    /// Extract features for a list of receiver points.
    Features(commands::FeaturesArgs),
    /// Convert RSRP measurements to pathloss.
    Convert(commands::ConvertArgs),
    /// Train a gradient-boosted model on dataset CSVs.
    Train(commands::TrainArgs),
    /// Score a model on a dataset CSV.
    Eval(commands::EvalArgs),
    /// Run an experiment config.
    Experiment(commands::ExperimentArgs),
    /// Run the bundled two-environment experiment.
    Demo(commands::DemoArgs),
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let out = cli.out_dir;
    match cli.command {
        Command::TerrainGen(a) => commands::terrain_gen(a, &out),
        Command::Simulate(a) => commands::simulate(a, &out),
        Command::Features(a) => commands::features(a, &out),
        Command::Convert(a) => commands::convert(a, &out),
        Command::Train(a) => commands::train(a, &out),
        Command::Eval(a) => commands::eval(a, &out),
        Command::Experiment(a) => commands::experiment(a, &out),
        Command::Demo(a) => commands::demo(a, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
