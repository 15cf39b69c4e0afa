//! Command-line front end for the diffract pipeline: dataset generation,
//! two-stage training, denoising, evaluation and ablation reports.
//!
//! Every command resolves its flags into a [`plan::Plan`], runs it and writes a
//! [`manifest::RunManifest`] next to its outputs; `replay` runs a recorded plan
//! again.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod pgm;
pub mod plan;

use args::{Cli, Command};
use error::{CliError, CliResult};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "DIFFRACT_THREADS";

pub fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let plan = match cli.command {
        Command::GenData(a) => a.resolve()?,
        Command::Train(a) => a.resolve()?,
        Command::Denoise(a) => a.resolve()?,
        Command::Eval(a) => a.resolve()?,
        Command::Ablate(a) => a.resolve()?,
        Command::Replay(a) => {
            commands::replay(&a.manifest, a.output)?;
            return Ok(());
        }
    };
    commands::execute(&plan)?;
    Ok(())
}
