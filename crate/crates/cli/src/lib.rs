//! The `rcrn` command-line tool: train, eval, gradcheck and bench.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rcrn::gradcheck::Fault;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rcrn", version, about = "Recurrently controlled recurrent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier; writes a checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the accuracy of a checkpoint on a TSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Test hook: skew the analytic gradient of matching parameters.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Time the encoder variants over the sequence-length grid.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write train.tsv and test.tsv for the first-token task.
    GenFirstToken {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_or_default(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Parses `args` and runs the subcommand. Reports go to `out`, progress to
/// `log`.
pub fn run<I, A>(args: I, out: &mut dyn Write, log: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::config(e.to_string()))?;
    match cli.command {
        Command::Train { config } => {
            commands::cmd_train(&RunConfig::load(config)?, out)?;
        }
        Command::Eval { checkpoint, data, workers } => {
            commands::cmd_eval(&checkpoint, &data, workers, out)?;
        }
        Command::Gradcheck { config, inject_fault } => {
            let fault = inject_fault.map(|group| Fault { group, skew: 0.1 });
            commands::cmd_gradcheck(&load_or_default(config.as_ref())?, fault, out)?;
        }
        Command::Bench { config } => {
            commands::cmd_bench(&load_or_default(config.as_ref())?, out, log)?;
        }
        Command::GenFirstToken {
            out_dir,
            n_train,
            n_test,
            steps,
            vocab,
            seed,
        } => commands::cmd_gen_first_token(&out_dir, n_train, n_test, steps, vocab, seed)?,
    }
    Ok(())
}
