// SPDX-License-Identifier: MIT OR Apache-2.0

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rce_core::Error;

#[derive(Parser)]
#[command(name = "rce", version, about = "Concept-library evolution over a frozen toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.spawn.tau=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the base model on the base tasks.
    PretrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolve a concept library on the mixed curriculum.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Base artifact written by `pretrain-base`.
        #[arg(long, required_unless_present = "resume")]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train until this step (also the schedule length of a fresh run).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Disable one mechanism; repeatable.
        #[arg(long = "ablate", value_name = "NAME")]
        ablate: Vec<String>,
    },
    /// Score base and augmented models on evaluation suites.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Suite name; repeatable (default: base and compositional).
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Also score a shifted copy: permute, reverse or distractor.
        #[arg(long)]
        ood: Option<String>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the concept table, growth curve and merge genealogy.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Event log; defaults to the run directory of the checkpoint.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Vary one hyperparameter over seeds and tabulate the results.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of r, k, tau, lambda, lambda_orth.
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit code for an error class.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Integrity { .. } | Error::Version { .. } => 4,
        Error::Numeric(_) | Error::DegenerateBasis(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PretrainBase { cfg, out } => commands::pretrain_base(&cfg, &out),
        Command::Train {
            cfg,
            base,
            out,
            steps,
            resume,
            ablate,
        } => commands::train(&cfg, base.as_deref(), &out, steps, resume.as_deref(), &ablate),
        Command::Eval {
            checkpoint,
            suites,
            ood,
            out,
        } => commands::eval(&checkpoint, &suites, ood.as_deref(), out.as_deref()),
        Command::Inspect { checkpoint, events } => commands::inspect(&checkpoint, events.as_deref()),
        Command::Sweep {
            cfg,
            key,
            values,
            seeds,
            out,
        } => commands::sweep(&cfg, &key, &values, &seeds, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
