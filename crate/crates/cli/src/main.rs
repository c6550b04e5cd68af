use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use faultlab::commands::{self, AnalyzeArgs, EvalArgs, Mode, TrainArgs};
use faultlab_core::experiment::GroupKey;
use faultlab_core::fault::DeviationKind;

#[derive(Parser)]
#[command(name = "faultlab", version, about = "Train classifiers and measure them under computational faults")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every model of a grid file into a zoo directory.
    Train {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, env = "MNIST_DIR")]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Monte-Carlo error rates of every zoo model under deviations.
    Eval {
        #[arg(long)]
        zoo: PathBuf,
        /// Defaults to the directory recorded when the zoo was trained.
        #[arg(long, env = "MNIST_DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "uniform,erasure")]
        kinds: Vec<DeviationKind>,
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        realizations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        range_lo: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        range_hi: f64,
        #[arg(long)]
        jobs: Option<usize>,
        /// Evaluate on the first N test images (default: as recorded in the zoo).
        #[arg(long)]
        test_limit: Option<usize>,
    },
    /// Derive curves, smallest-model tables or efficiency from results.
    Analyze {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
        #[arg(long, default_value = "L")]
        group_by: GroupKey,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> faultlab::Result<()> {
    match cli.command {
        Command::Train {
            grid,
            data_dir,
            out,
            seed,
            jobs,
        } => {
            let s = commands::train_grid(&TrainArgs {
                grid,
                data_dir,
                out,
                seed,
                jobs,
            })?;
            eprintln!(
                "{} trained, {} already present, {} invalid",
                s.trained.len(),
                s.skipped_existing.len(),
                s.skipped_invalid.len()
            );
        }
        Command::Eval {
            zoo,
            data_dir,
            kinds,
            p,
            realizations,
            seed,
            out,
            range_lo,
            range_hi,
            jobs,
            test_limit,
        } => {
            let rows = commands::eval(&EvalArgs {
                zoo,
                data_dir,
                kinds,
                p,
                realizations,
                seed,
                out,
                range: (range_lo, range_hi),
                jobs,
                test_limit,
            })?;
            eprintln!("{} result rows written", rows.len());
        }
        Command::Analyze {
            results,
            mode,
            targets,
            group_by,
            k,
            out,
        } => commands::analyze(&AnalyzeArgs {
            results,
            mode,
            targets,
            group_by,
            k,
            out,
        })?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
