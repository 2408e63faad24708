//! `raremem`: data generation, training, evaluation and inspection for the life-long memory.

mod bench;
mod config;
mod data;
mod inspect;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigFile, UsageError};

#[derive(Debug, Parser)]
#[command(name = "raremem", version, about)]
struct Cli {
    /// File of `key=value` lines supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its task snapshot.
    GenData(data::GenDataArgs),
    /// Train the encoder and memory, optionally resuming from a checkpoint.
    Train(run::TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(run::EvalArgs),
    /// Measure accuracy before and after feeding a context set through the memory.
    OneshotEval(run::OneshotArgs),
    /// Benchmark nearest-neighbor search on random keys.
    BenchNn(bench::BenchArgs),
    /// Print slots of a memory snapshot.
    InspectMemory(inspect::InspectArgs),
}

/// Shared by subcommands that take a seed.
#[derive(Debug, Args)]
struct SeedArg {
    /// Seed for all randomness; falls back to the config file, then RAREMEM_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli
        .config
        .as_deref()
        .map(ConfigFile::load)
        .transpose()
        .and_then(|file| match cli.command {
            Command::GenData(args) => data::gen_data(args, file),
            Command::Train(args) => run::train(args, file),
            Command::Eval(args) => run::eval(args, file),
            Command::OneshotEval(args) => run::oneshot_eval(args, file),
            Command::BenchNn(args) => bench::bench_nn(args, file),
            Command::InspectMemory(args) => inspect::inspect_memory(args, file),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
