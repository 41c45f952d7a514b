mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Learn controlled dynamics as neural SDEs and control them with stochastic MPC.
#[derive(Debug, Parser)]
#[command(name = "nsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides a config entry, e.g. `--set train.max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory, created when missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Parameter checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Model description; defaults to `model.json` next to the checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from the [gen] section.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Distance map and uncertainty fields on grids.
    EvalGrid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Open-loop prediction against a recorded or simulated trajectory.
    EvalOpenloop {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Closed-loop MPC episode on the simulated plant.
    Mpc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Reference CSV (`t,x_0,...`); overrides the config.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<nsde_core::Error> for CliError {
    fn from(e: nsde_core::Error) -> Self {
        match e {
            nsde_core::Error::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train { common, data } => commands::train(&common, &data),
        Command::EvalGrid { common, model } => commands::eval_grid(&common, &model),
        Command::EvalOpenloop { common, model, data } => commands::eval_openloop(&common, &model, data.as_deref()),
        Command::Mpc { common, model, reference } => commands::mpc(&common, &model, reference.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
