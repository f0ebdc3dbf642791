mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "taftseg",
    version,
    about = "Few-shot segmentation with task-adaptive feature transforms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Export synthetic image/mask pairs as PNG files.
    GenerateData(Common),
    /// Meta-train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Do not print per-interval losses.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate the run's checkpoint on held-out classes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate the run's checkpoint at every shot count of `eval.shot_list`.
    SweepShots {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train while recording prototype and reference drift.
    Stability(Common),
    /// Train and evaluate every ablation row.
    Ablate(Common),
    /// Run the numerical self-tests.
    Check(Common),
}

#[derive(Debug)]
pub enum CliError {
    Config { key: String, message: String },
    Runtime { seed: Option<u64>, message: String },
}

impl From<taftseg::Error> for CliError {
    fn from(e: taftseg::Error) -> Self {
        match e {
            taftseg::Error::Config(msg) => {
                let (key, message) = match msg.split_once(": ") {
                    Some((k, m)) if !k.contains(' ') => (k.to_string(), m.to_string()),
                    _ => ("config".to_string(), msg),
                };
                CliError::Config { key, message }
            }
            other => CliError::Runtime {
                seed: other.episode_seed(),
                message: other.to_string(),
            },
        }
    }
}

impl From<taftseg::tensor::TensorError> for CliError {
    fn from(e: taftseg::tensor::TensorError) -> Self {
        taftseg::Error::from(e).into()
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime { .. } => 1,
        }
    }

    fn line(&self) -> String {
        match self {
            CliError::Config { key, message } => json!({ "error": "config", "key": key, "message": message }),
            CliError::Runtime { seed, message } => {
                json!({ "error": "runtime", "episode_seed": seed, "message": message })
            }
        }
        .to_string()
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |c: &Common| config::load(c.config.as_deref(), &c.overrides);
    match cli.command {
        Command::GenerateData(c) => commands::generate_data(&load(&c)?),
        Command::Train { common, quiet } => commands::train(&load(&common)?, quiet),
        Command::Eval { common, checkpoint } => commands::eval(&load(&common)?, checkpoint.as_deref()),
        Command::SweepShots { common, checkpoint } => commands::sweep_shots(&load(&common)?, checkpoint.as_deref()),
        Command::Stability(c) => commands::stability(&load(&c)?),
        Command::Ablate(c) => commands::ablate(&load(&c)?),
        Command::Check(c) => commands::check(&load(&c)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
