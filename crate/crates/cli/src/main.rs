use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use koop_core::KoopError;

mod config;
mod run;

use config::{RunArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "koop", version, about = "Koopman spectral analysis of discrete maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a trajectory CSV
    Generate(RunArgs),
    /// Finite section F⁺F' (or the exact section with --analytic)
    Edmd(RunArgs),
    /// SVD-based DMD with a similarity check against F⁺F'
    Svd(RunArgs),
    /// Companion-matrix fit on delays of one observable
    Hankel(RunArgs),
    /// Generalized Laplace analysis for given eigenvalues
    Gla(RunArgs),
    /// Weak eigenfunctional averages
    Weak(RunArgs),
    /// Sample-convergence or residual-decay study
    Convergence(RunArgs),
    /// Rerun a saved config
    Replay { config: PathBuf },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Koop(#[from] KoopError),
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Koop(e) => e.exit_code() as u8,
            _ => 2,
        }
    }
}

fn config_for(cli: Cli) -> Result<RunConfig, CliError> {
    let (name, args) = match cli.command {
        Command::Replay { config } => return RunConfig::load(&config),
        Command::Generate(a) => ("generate", a),
        Command::Edmd(a) => ("edmd", a),
        Command::Svd(a) => ("svd", a),
        Command::Hankel(a) => ("hankel", a),
        Command::Gla(a) => ("gla", a),
        Command::Weak(a) => ("weak", a),
        Command::Convergence(a) => ("convergence", a),
    };
    RunConfig::from_args(name, args)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = config_for(cli).and_then(|mut cfg| {
        cfg.apply_env()?;
        run::dispatch(&cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
