//! Command-line front end: simulate, fit, evaluate, select-b and bench.

pub mod commands;
pub mod config;
pub mod error;
pub mod model_io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "panelgp", version, about = "Intensity estimation from panel count data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// gp4c, gp3, gp4cw or pwc.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Override any config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate recurrent and panel data plus the true intensity table.
    Simulate,
    /// Fit a model to training data.
    Fit,
    /// Score a fitted model on test data.
    Evaluate,
    /// Pick b by the gap-variance criterion.
    SelectB,
    /// Time fits over pseudo-input counts and training-set sizes.
    Bench,
}

impl Cli {
    /// Config file, then `--set` overrides, then the dedicated flags.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(model) = &self.model {
            cfg.set("model", model)?;
        }
        Ok(cfg)
    }
}

pub fn run_command(command: Command, cfg: &ExperimentConfig) -> Result<(), CliError> {
    match command {
        Command::Simulate => commands::cmd_simulate(cfg),
        Command::Fit => commands::cmd_fit(cfg),
        Command::Evaluate => commands::cmd_evaluate(cfg),
        Command::SelectB => commands::cmd_select_b(cfg),
        Command::Bench => commands::cmd_bench(cfg),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = cli.resolve().and_then(|cfg| run_command(cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
