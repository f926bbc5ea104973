//! Experiment runner behind the `gadmm` binary.

pub mod config;
pub mod diagnose;
pub mod output;
pub mod sweep;

use std::fmt;
use std::path::Path;

use crate::error::GadmmError;
use config::{parse_config, ConfigError, ExperimentConfig};

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    MissingFile(String),
    Config(String),
    Io(std::io::Error),
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingFile(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::MissingFile(m) | CliError::Config(m) | CliError::Solver(m) => f.write_str(m),
            CliError::Io(e) => write!(f, "output error: {e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::MissingFile(_) => CliError::MissingFile(e.to_string()),
            ConfigError::Invalid { .. } => CliError::Config(e.to_string()),
        }
    }
}

impl From<GadmmError> for CliError {
    fn from(e: GadmmError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Sweep,
    Diagnose,
}

/// Loads the config and applies command-line overrides.
pub fn load(path: &Path, seed: Option<u64>, workers: Option<usize>) -> Result<ExperimentConfig, CliError> {
    let mut exp = parse_config(path)?;
    if let Some(s) = seed {
        exp = exp.with_seed(s);
    }
    if let Some(w) = workers {
        exp.workers = w.max(1);
    }
    Ok(exp)
}

/// Runs one command and writes its outputs into `out`.
pub fn execute(command: Command, exp: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    match command {
        Command::Run => {
            let results = sweep::run_single(exp)?;
            output::emit_all(exp, &results, out)?;
            finish(&results)
        }
        Command::Sweep => {
            let spec = exp
                .sweep
                .as_ref()
                .ok_or_else(|| CliError::Config("invalid config field `sweep`: a [sweep] table is required".into()))?;
            let results = sweep::run_sweep(exp, spec)?;
            output::emit_all(exp, &results, out)?;
            finish(&results)
        }
        Command::Diagnose => {
            let report = diagnose::diagnose(exp)?;
            std::fs::create_dir_all(out)?;
            let json = serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?;
            std::fs::write(out.join("diagnostics.json"), json + "\n")?;
            Ok(())
        }
    }
}

fn finish(results: &sweep::SweepResults) -> Result<(), CliError> {
    let failed: Vec<String> = results
        .rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().err().map(|e| e.to_string()))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Solver(format!("{} run(s) failed: {}", failed.len(), failed.join("; "))))
    }
}
