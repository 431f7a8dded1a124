//! `hbl`: command-line access to the Hadamard / ternary quantization stack.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 training diverged.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "hbl",
    version,
    about = "Hadamard-rotated low-bit quantization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply the orthonormal Walsh-Hadamard transform along the last axis.
    Hadamard {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Inverse transform (identical to the forward one).
        #[arg(long)]
        inverse: bool,
    },
    /// Quantize a tensor; per-token (or per-tensor) scales go to `<out>.scale.bnt`.
    Quantize {
        #[arg(long, value_enum)]
        mode: QuantMode,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the dequantized tensor here.
        #[arg(long)]
        dequant: Option<PathBuf>,
        /// KV modes: keep row 0 at 8 bits.
        #[arg(long)]
        bos_first: bool,
    },
    /// Time the packed integer GEMM on random operands.
    GemmBench(GemmBenchArgs),
    /// Distribution statistics of a tensor.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Uniform-bin histogram written as CSV.
    Hist {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        bins: usize,
        #[arg(long, allow_negative_numbers = true)]
        min: f32,
        #[arg(long, allow_negative_numbers = true)]
        max: f32,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Quantization error with and without the Hadamard transform.
    RotateCompare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = ["4", "8"])]
        bits: String,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Train one stage of the toy model.
    TrainToy(TrainArgs),
    /// Train every rotation variant and report final losses.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum QuantMode {
    #[value(name = "w1.58")]
    W158,
    A8,
    A4,
    Kv4,
    Kv3,
}

#[derive(Args, Debug)]
struct GemmBenchArgs {
    /// Tokens.
    #[arg(long)]
    m: usize,
    /// Output features.
    #[arg(long)]
    n: usize,
    /// Inner dimension.
    #[arg(long)]
    k: usize,
    #[arg(long, value_parser = ["4", "8"])]
    act_bits: String,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = ["a8", "a4"])]
    stage: String,
    /// Checkpoint directory to continue from (required for a4).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Start the stage with zeroed optimizer moments.
    #[arg(long)]
    reset_optimizer: bool,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("HBL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("HBL_THREADS={v:?} is not a non-negative integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
