use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod grid;

use grid::Grid;

/// Train, evaluate and compare sequential quantum-metrology strategies.
#[derive(Debug, Parser)]
#[command(name = "qmetro", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured agent and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the master seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Caps the number of episodes simulated in parallel (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Reuse a run directory whose configuration differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint or a fixed strategy and write an evaluation CSV.
    Eval {
        /// Experiment configuration; defaults to the run directory of the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Heuristic strategy to evaluate instead of a checkpoint.
        #[arg(long)]
        agent: Option<String>,
        /// Resource values (or signal amplitudes for the Dolinar task).
        #[arg(long)]
        grid: Option<Grid>,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Evaluate even if the checkpoint was trained on another configuration.
        #[arg(long)]
        force: bool,
    },
    /// Tabulate a precision or error-probability bound.
    Bounds {
        /// dc, ac, decoherence, hyperfine, ramp or helstrom.
        #[arg(long)]
        task: String,
        /// Row of the bound tables (NV tasks only).
        #[arg(long, default_value = "t2_infinite")]
        case: String,
        #[arg(long, default_value = "measurement")]
        regime: String,
        #[arg(long)]
        grid: Grid,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge evaluation CSVs of several runs into one table keyed by resource.
    Compare {
        /// Run directories or evaluation CSV files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("QMETRO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed, workers, force } => {
            commands::train(&commands::TrainArgs { config, out, seed, workers, force })
        }
        Command::Eval { config, checkpoint, agent, grid, out, seed, workers, force } => {
            commands::eval(&commands::EvalArgs {
                config,
                checkpoint,
                agent,
                grid: grid.map(|g| g.0),
                out,
                seed,
                workers,
                force,
            })
        }
        Command::Bounds { task, case, regime, grid, out } => commands::bounds(&task, &case, &regime, &grid.0, out.as_deref()),
        Command::Compare { runs, out } => commands::compare(&runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
