//! `cdr`: preprocess, train, evaluate, ablate and export tripartite-graph
//! recommenders from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 failure while
//! running.

mod commands;
mod config;
mod error;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{EvalFlags, TrainFlags};
use crate::config::{Overrides, RunConfig};
use crate::error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "cdr", version, about = "Consistency/discrepancy recommender on tripartite graphs")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a run configuration.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant, or a comma-separated list for `ablate`
    #[arg(long)]
    variant: Option<String>,
    /// Seeds the split and both training stages
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau_pretrain: Option<f64>,
    #[arg(long)]
    tau_finetune: Option<f64>,
    /// Embedding dimension of both stages
    #[arg(long)]
    dim: Option<usize>,
    /// Comma-separated cut-offs, e.g. 10,20,30
    #[arg(long)]
    k: Option<String>,
    /// Run directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// `full` or `sampled:N`
    #[arg(long)]
    negatives: Option<String>,
    /// cd, origin, mse or ce
    #[arg(long)]
    loss: Option<String>,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let o = Overrides {
            variant: self.variant.clone(),
            seed: self.seed,
            tau_pretrain: self.tau_pretrain,
            tau_finetune: self.tau_finetune,
            dim: self.dim,
            k: self.k.clone(),
            out: self.out.clone(),
            negatives: self.negatives.clone(),
            loss: self.loss.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the graph, split interactions, build and export both metric sets
    Preprocess(Common),
    /// Train one variant and write its checkpoint and logs
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved optimiser state in the run directory
        #[arg(long)]
        resume: bool,
        /// Save resumable state every N epochs
        #[arg(long, default_value_t = 1)]
        checkpoint_every: usize,
        /// Stop after N epochs in this process, leaving resumable state
        #[arg(long, hide = true)]
        stop_after_epochs: Option<usize>,
    },
    /// Rank the test split with a trained checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (default: <out>/checkpoints/final)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate even if the checkpoint was trained under another config
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Train and evaluate several variants on one shared split
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Repeat every variant for each temperature in `taus`
        #[arg(long)]
        sweep: bool,
    },
    /// Write metric coordinate files
    Export {
        #[command(flatten)]
        common: Common,
        /// pretrain, finetune or both
        #[arg(long, default_value = "both")]
        stage: String,
    },
    /// Write a synthetic community graph and a starter config
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// small or mafengwo (sizes of the public Mafengwo data)
        #[arg(long, default_value = "small")]
        shape: String,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Preprocess(common) => commands::preprocess(&common.resolve()?),
        Command::Train {
            common,
            resume,
            checkpoint_every,
            stop_after_epochs,
        } => {
            let flags = TrainFlags {
                resume,
                checkpoint_every,
                stop_after_epochs,
            };
            commands::train(&common.resolve()?, &flags)
        }
        Command::Evaluate {
            common,
            checkpoint,
            allow_hash_mismatch,
        } => {
            let flags = EvalFlags {
                checkpoint,
                allow_hash_mismatch,
            };
            commands::evaluate_cmd(&common.resolve()?, &flags)
        }
        Command::Ablate { common, sweep } => commands::ablate(&common.resolve()?, sweep),
        Command::Export { common, stage } => commands::export(&common.resolve()?, &stage),
        Command::Generate { out, seed, shape } => commands::generate(&out, seed, &shape),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are input errors, not clap's default of 2
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
