use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod output;
mod setup;

use config::{Config, ConfigError};

#[derive(Parser)]
#[command(name = "ebdl", version, about = "Energy-based diffusion model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Flat `key = value` config file; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Op {
    And,
    Or,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, the training log and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Metric sweep of a checkpoint (or `oracle`) over the time grid.
    Eval {
        #[arg(long)]
        checkpoint: String,
        #[command(flatten)]
        common: Common,
    },
    /// Draw samples from a checkpoint by reverse integration.
    Sample {
        #[arg(long)]
        checkpoint: String,
        #[command(flatten)]
        common: Common,
    },
    /// How far apart mixtures with different mode weights look to each metric.
    Blindness {
        #[command(flatten)]
        common: Common,
    },
    /// SMC sampling from the product or mixture of two densities.
    Compose {
        #[arg(long)]
        checkpoint_a: String,
        #[arg(long)]
        checkpoint_b: String,
        #[arg(long, value_enum)]
        op: Op,
        #[command(flatten)]
        common: Common,
    },
    /// SMC along an interpolant path with learned intermediate energies.
    SmcBg {
        #[arg(long)]
        checkpoint: String,
        #[command(flatten)]
        common: Common,
    },
    /// Free-energy differences by FEP, BAR, TI and MBAR.
    FreeEnergy {
        #[arg(long)]
        checkpoint: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check of every loss.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(o) = &common.out {
        cfg.set("out_dir", &o.display().to_string())?;
    }
    if let Some(w) = common.workers {
        cfg.set("workers", &w.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common } => commands::train(&resolve(&common)?),
        Command::Eval { checkpoint, common } => commands::eval(&resolve(&common)?, &checkpoint),
        Command::Sample { checkpoint, common } => commands::sample(&resolve(&common)?, &checkpoint),
        Command::Blindness { common } => commands::blindness(&resolve(&common)?),
        Command::Compose {
            checkpoint_a,
            checkpoint_b,
            op,
            common,
        } => commands::compose(&resolve(&common)?, &checkpoint_a, &checkpoint_b, op),
        Command::SmcBg { checkpoint, common } => commands::smc_bg(&resolve(&common)?, &checkpoint),
        Command::FreeEnergy { checkpoint, common } => commands::free_energy(&resolve(&common)?, checkpoint.as_deref()),
        Command::GradCheck { common } => commands::grad_check(&resolve(&common)?),
    }
}

/// 2 for configuration and input problems, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    use ebdl_core::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<commands::CheckFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite { .. } | E::Convergence { .. } => 3,
                E::Io(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
