//! Harness for the polymer experiments: configuration, dispatch, result
//! files and plot data. The `polymer` binary is a thin clap front end.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use polymer_core::Error as CoreError;

pub use commands::Command;
pub use config::RunConfig;
pub use output::ResultBundle;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 2 for bad input, 3 for an exhausted budget, 4 for non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Core(CoreError::Validation(_)) => 2,
            HarnessError::Core(CoreError::BudgetExceeded { .. }) => 3,
            HarnessError::Core(CoreError::NonConvergence(_)) => 4,
            _ => 1,
        }
    }
}

/// Execution settings that do not change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub serial: bool,
    pub threads: Option<usize>,
}

/// Runs one subcommand and writes its bundle under `<out>/<command>`.
pub fn run(command: Command, cfg: &RunConfig, opts: &RunOptions) -> Result<ResultBundle, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let root = opts.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut w = output::BundleWriter::new(&root.join(command.name()), command.name(), &cfg.hash());
    let parallel = !opts.serial;
    let threads = if opts.serial { 1 } else { opts.threads.unwrap_or(0) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(command, cfg, parallel, &mut w))?;
    w.finish(start.elapsed())
}
