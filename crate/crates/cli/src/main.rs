//! `lcdr`: ingest, train, evaluate, sweep, report and simulate.

mod commands;
mod overrides;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lcdr_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lcdr", version, about = "Confounder-aware debiased recommendation")]
pub struct Cli {
    /// Run configuration (TOML with [data], [train], [recommender], [run]).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single seed; overrides the configured seed list.
    #[arg(long, global = true, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Seed list such as `0,1,2` or a range `0..10`.
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    /// Output directory (or file, for `report`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for gradient evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override a configuration value, e.g. `--set train.lambda=0.5`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a raw dataset into the canonical layout.
    Ingest {
        /// coat, triples (yahoo), kuairand or canonical.
        #[arg(long)]
        format: String,
        /// Raw file or directory; for kuairand, the schema TOML.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = lcdr_core::dataio::DEFAULT_RATING_THRESHOLD)]
        threshold: f64,
        /// Share of unbiased records assigned to validation.
        #[arg(long, default_value_t = 0.3)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        num_users: Option<usize>,
        #[arg(long)]
        num_items: Option<usize>,
    },
    /// Stage one and stage two for every seed; writes a run directory.
    Train {
        /// Canonical dataset directory (overrides [data] path).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Re-split the unbiased records per seed with this validation share.
        #[arg(long)]
        resplit: Option<f64>,
    },
    /// Re-score a run directory's checkpoints.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train once per value of a parameter and tabulate the means.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only `lambda` is supported.
        #[arg(long, default_value = "lambda")]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        resplit: Option<f64>,
    },
    /// Aggregate run directories into a table.
    Report {
        /// Run directories to tabulate.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run used for the paired t-test column.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Generate a synthetic confounded dataset.
    Simulate {
        /// Synthetic-data TOML; defaults apply when omitted.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        val_fraction: f64,
    },
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
    Conflict(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Conflict(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Numerical(m) | CliError::Conflict(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
