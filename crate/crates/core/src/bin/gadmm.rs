use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gadmm::experiments::{execute, load, Command};

#[derive(Parser)]
#[command(name = "gadmm", version, about = "Distributed learning experiments with generalized ADMM")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured experiment once
    Run(Common),
    /// Run one experiment per value of the [sweep] table
    Sweep(Common),
    /// Write a diagnostics report for the configured problem
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment manifest (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the seed from the manifest
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Run(a) => (Command::Run, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
        Cmd::Diagnose(a) => (Command::Diagnose, a),
    };
    let result = load(&args.config, args.seed, args.workers).and_then(|exp| execute(command, &exp, &args.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
