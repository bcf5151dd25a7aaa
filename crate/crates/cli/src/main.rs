//! `abf`: runs the sampler, fixed-point, flow and verification experiments.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 numerical failure.

mod commands;
mod config;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io { .. } => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "abf", version, about = "Adaptive biasing force experiments on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the adaptive sampler.
    Simulate(Common),
    /// Picard fixed points over the epsilon list.
    FixedPoint(Common),
    /// Integrate the limiting flow on z-densities.
    Flow(Common),
    /// Run the property checks and write verify.json.
    Verify(Common),
    /// Tabulate the free energy and mean force on the grid.
    Oracle(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// `key=value` or `section.key=value`, applied after the file.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Output directory; falls back to the config's `output_dir`, then `./out`.
    #[arg(long, env = "ABF_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

/// A loaded config together with its resolved output directory.
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<Context, CliError> {
        let mut config = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
            // a second initialization is impossible in one process; ignore it
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        let out = self
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out).map_err(|e| {
            CliError::Config(format!("cannot create output directory {}: {e}", out.display()))
        })?;
        Ok(Context { config, out })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => c.resolve().and_then(|ctx| commands::simulate(&ctx)),
        Command::FixedPoint(c) => c.resolve().and_then(|ctx| commands::fixed_point(&ctx)),
        Command::Flow(c) => c.resolve().and_then(|ctx| commands::flow(&ctx)),
        Command::Verify(c) => c.resolve().and_then(|ctx| verify::run(&ctx)),
        Command::Oracle(c) => c.resolve().and_then(|ctx| commands::oracle(&ctx)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("abf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
