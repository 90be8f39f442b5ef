//! `muse` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
//! invariant violation. Failures print one JSON object on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use muse_core::{ErrorKind, Mode, MuseError};

mod commands;
mod config;
mod manifest;

#[derive(Debug, Parser)]
#[command(
    name = "muse",
    version,
    about = "Lifelong behavior modeling with multimodal search"
)]
struct Cli {
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Behavior length cap: academic (1 000) or production (100 000).
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a sample file against an embedding table and write its manifest.
    Ingest(DataArgs),
    /// Generate a planted-signal dataset.
    Synthesize {
        #[arg(long)]
        users: Option<u64>,
        #[arg(long)]
        signal_strength: Option<f64>,
    },
    /// Train one model for one epoch and write a checkpoint.
    Train,
    /// Compute AUC / GAUC for a predictions file or a checkpoint.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the top-K behaviors of a user for a target item.
    Retrieve {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        user: Option<u64>,
        #[arg(long)]
        target: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        /// Retrieval strategy name.
        #[arg(long)]
        gsu: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Benchmark exact top-K retrieval throughput.
    Bench {
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Use the multi-threaded scoring path.
        #[arg(long)]
        parallel: bool,
        /// Also run twice the sequence length and report the time ratio.
        #[arg(long)]
        scaling: bool,
    },
    /// Simulate async prefetch against a synchronous pipeline.
    Simulate {
        /// Built-in scenario name.
        #[arg(long)]
        scenario: Option<String>,
        /// Also write the per-request trace as CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Train and compare a grid of retrieval × ESU variants.
    Ablate,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// JSON-lines sample file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Binary embedding table.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Count unknown item ids instead of failing.
    #[arg(long)]
    permissive: bool,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Internal => 4,
    }
}

fn report(err: &MuseError) -> ExitCode {
    let kind = err.kind();
    let json = serde_json::json!({
        "error": {
            "kind": kind,
            "message": err.to_string(),
        }
    });
    eprintln!("{json}");
    ExitCode::from(exit_code(kind))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MUSE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report(&MuseError::Config(e.to_string()));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
