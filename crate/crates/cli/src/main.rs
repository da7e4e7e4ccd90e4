//! `graphprompt`: pre-train, tune, evaluate, ablate, sweep, time and check.
//!
//! Exit codes: 0 success, 1 data or file error, 2 configuration error,
//! 3 training error, 4 dimension mismatch, 5 gradient check failure.
//! Logs go to stderr (`RUST_LOG` controls the level); stdout carries only the
//! final summary table.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use graphprompt::eval::{Level, SweepAxis};
use graphprompt::prompt::Variant;
use graphprompt::Error;

#[derive(Parser, Debug)]
#[command(name = "graphprompt", version, about = "Subgraph-similarity pre-training and prompt tuning for few-shot graph learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a run configuration.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Master seed, overriding the config's `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: all cores]
    #[arg(long)]
    jobs: Option<usize>,
}

/// Protocol overrides; unset flags keep the config's values.
#[derive(Args, Debug, Clone)]
struct ProtocolArgs {
    /// Task level [default: from config]
    #[arg(long)]
    level: Option<Level>,
    /// Shots per class [default: from config]
    #[arg(long)]
    k: Option<usize>,
    /// Number of tasks [default: 10 node-level, 100 graph-level]
    #[arg(long)]
    tasks: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the encoder on link prediction and write a checkpoint
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path [default: <out_dir>/checkpoint.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune one head on a single task and write it
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Tuning variant [default: from config]
        #[arg(long)]
        variant: Option<Variant>,
        /// Index of the task to tune
        #[arg(long, default_value_t = 0)]
        task: usize,
        /// Head path [default: <out_dir>/head.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the few-shot protocol and write report artifacts
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Tuning variant [default: from config]
        #[arg(long)]
        variant: Option<Variant>,
        /// Report directory [default: <out_dir>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every variant on the same tasks
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Report directory, one subdirectory per variant [default: <out_dir>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run pre-training and evaluation for each value of one parameter
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Report directory, one subdirectory per value [default: <out_dir>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time prompt-tuning epochs across graph-size buckets
    Scalability {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated bucket centres (node counts)
        #[arg(long, value_delimiter = ',', default_value = "50,60,70,80,90,100")]
        buckets: Vec<usize>,
        /// Output directory [default: <out_dir>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Module::All)]
        module: Module,
        /// Randomized fixtures per suite
        #[arg(long, default_value_t = 50)]
        fixtures: usize,
        #[arg(long, default_value_t = 20240611)]
        seed: u64,
        /// Corrupt one backward rule (self-test of the checker)
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print dataset statistics
    Inspect {
        #[command(flatten)]
        common: Common,
    },
    /// Write a planted-partition dataset in TU format
    Synth {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Dataset name (file prefix)
        #[arg(long, default_value = "SYNTH")]
        name: String,
        #[arg(long, default_value_t = 20)]
        graphs: usize,
        #[arg(long, default_value_t = 30)]
        nodes: usize,
        #[arg(long, default_value_t = 0.15)]
        edge_prob: f64,
        #[arg(long, default_value_t = 4)]
        feature_dim: usize,
        #[arg(long, default_value_t = 2)]
        node_classes: usize,
        #[arg(long, default_value_t = 2)]
        graph_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    All,
    /// Pre-training loss only
    Pretrain,
    /// Prompt-tuning loss only
    Prompt,
    /// Classifier-ablation cross-entropy only
    Classifier,
}

/// A failed command: message for stderr, the exit code, and any summary
/// still worth printing (the gradient-check table).
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
    pub summary: Option<String>,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            summary: None,
        }
    }
}

pub const EXIT_DATA: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_TRAINING: u8 = 3;
pub const EXIT_DIMENSION: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::MissingFile { .. } | Error::Format { .. } | Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => {
                EXIT_DATA
            }
            Error::Config(_) => EXIT_CONFIG,
            Error::Dimension { .. } => EXIT_DIMENSION,
            Error::Shape { .. }
            | Error::Index { .. }
            | Error::Contract(_)
            | Error::Sampling(_)
            | Error::TaskConstruction { .. }
            | Error::Pretrain(_) => EXIT_TRAINING,
        };
        Failure::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            if let Some(summary) = &f.summary {
                print!("{summary}");
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
