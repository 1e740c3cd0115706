use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polymer_cli::{run, Command, HarnessError, RunConfig, RunOptions};

#[derive(Parser)]
#[command(name = "polymer", version, about = "Stretched polymer in a random potential")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// TOML run configuration.
    #[arg(long, global = true, env = "POLYMER_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory; results go to `<out>/<subcommand>/`.
    #[arg(long, global = true, env = "POLYMER_OUT")]
    out: Option<PathBuf>,
    /// Overrides the base seed of the config.
    #[arg(long, global = true, env = "POLYMER_SEED")]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible mode.
    #[arg(long, global = true, env = "POLYMER_SERIAL")]
    serial: bool,
    #[arg(long, global = true, env = "POLYMER_THREADS")]
    threads: Option<usize>,
    /// Overrides the enumeration node budget.
    #[arg(long, global = true, env = "POLYMER_BUDGET_NODES")]
    budget_nodes: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Quenched path weights of one family, with the renewal check for `t`.
    Enumerate,
    /// Slab solve of the quenched partition function.
    Quenched,
    /// Exact annealed partition functions and the attractiveness check.
    Annealed,
    /// Annealed renewal table and its convergence.
    Renewal,
    /// Tilted free energy on a grid.
    Tilt,
    /// Annealed diffusivity against finite-N second moments.
    Diffusivity,
    /// Sinai expansions of the quenched cone-confined weights.
    Sinai,
    /// Replica mean of the partial sums.
    MeanOne,
    /// Replica variance of the normalised partition function.
    Ratio,
    /// Quenched endpoint spread against the annealed Gaussian.
    Diffusive,
    /// Box averages of the partial sums.
    Positivity,
    /// Effective walks: synchronised tail, bubbles and decay.
    Walks,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Enumerate => Command::Enumerate,
            Sub::Quenched => Command::Quenched,
            Sub::Annealed => Command::Annealed,
            Sub::Renewal => Command::Renewal,
            Sub::Tilt => Command::Tilt,
            Sub::Diffusivity => Command::Diffusivity,
            Sub::Sinai => Command::Sinai,
            Sub::MeanOne => Command::MeanOne,
            Sub::Ratio => Command::Ratio,
            Sub::Diffusive => Command::Diffusive,
            Sub::Positivity => Command::Positivity,
            Sub::Walks => Command::Walks,
        }
    }
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let path = cli.config.as_ref().ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.budget_nodes {
        cfg.budgets.node_budget = n;
    }
    let opts = RunOptions { out: cli.out.clone(), serial: cli.serial, threads: cli.threads };
    let bundle = run(cli.command.into(), &cfg, &opts)?;
    println!("config {}", bundle.config_hash);
    for f in &bundle.files {
        println!("wrote {}", f.display());
    }
    println!("{:.3}s", bundle.wall_time_secs);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
