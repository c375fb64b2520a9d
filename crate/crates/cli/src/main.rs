//! `cbamnet`: train, evaluate, cross-validate and gradient-check CBAM
//! classifiers, or write a synthetic dataset.
//!
//! Exit codes: 0 success, 1 gradient check over its bound, 2 configuration
//! error, 3 data or file error, 4 numerical failure, 5 a cross-validation
//! fold whose training part lacks a class.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EvalArgs, RunContext};
use config::RunConfig;
use failure::{exit, Failure};

#[derive(Parser)]
#[command(name = "cbamnet", version, about = "CBAM attention CNN for two-class skin-lesion images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, train with best-validation checkpointing, and report on the test partition.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on a dataset.
    Eval(EvalCli),
    /// k-fold cross-validation of every configured model.
    Crossval {
        #[command(flatten)]
        run: RunArgs,
        /// Number of folds (at least 2).
        #[arg(long, default_value_t = 4)]
        folds: usize,
    },
    /// Compare tape gradients with central differences at 3x16x16 input.
    Gradcheck {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Scales the sigmoid backward rule; a negative control for testing.
        #[arg(long, hide = true)]
        sigmoid_grad_fault: Option<f64>,
    },
    /// Write a synthetic dataset as PPM files under Monkeypox/ and Others/.
    Synth {
        /// Number of images (even).
        #[arg(long)]
        n: usize,
        /// Image height and width.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dataset root with Monkeypox/ and Others/; overrides the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalCli {
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root with Monkeypox/ and Others/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run configuration supplying data and threshold when --data is absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Model name in the report.
    #[arg(long, default_value = "model")]
    label: String,
    /// Decision threshold on the predicted probability.
    #[arg(long)]
    threshold: Option<f64>,
}

impl RunArgs {
    fn context(self) -> Result<RunContext, Failure> {
        RunContext::new(&self.config, self.data, self.out, self.seed, self.threads)
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Train(args) => commands::train(&args.context()?)?,
        Command::Eval(args) => commands::eval(&EvalArgs {
            checkpoint: args.checkpoint,
            data: args.data,
            config: args.config,
            out: args.out,
            label: args.label,
            threshold: args.threshold,
        })?,
        Command::Crossval { run, folds } => commands::crossval(&run.context()?, folds)?,
        Command::Gradcheck {
            config,
            seed,
            sigmoid_grad_fault,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if !commands::gradcheck(&cfg, sigmoid_grad_fault)? {
                return Ok(exit::CHECK_FAILED);
            }
        }
        Command::Synth { n, size, seed, out } => commands::synth(n, size, seed, &out)?,
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code)
        }
    }
}
