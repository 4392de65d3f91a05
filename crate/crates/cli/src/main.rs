//! `radt-lab`: dataset generation, training, evaluation, ablations and
//! probes for return-conditioned sequence models.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 integrity failure
//! (tampered checkpoint or config digest mismatch), 4 partial failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use radt_core::envs::EnvId;
use radt_core::model::Arch;
use radt_core::Error;

use commands::{AblateArgs, EvalArgs, Outcome, ProbeArgs, ProbeMode};

const SEED_VAR: &str = "RADT_LAB_SEED";

#[derive(Parser)]
#[command(name = "radt-lab", version, about = "Return-aligned decision transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a behavior dataset and its return statistics.
    GenData {
        /// linewalk, gridcollect or delaychain.
        #[arg(long)]
        env: EnvId,
        #[arg(long, default_value_t = 200)]
        n_traj: usize,
        /// Defaults to $RADT_LAB_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[run] out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate return alignment of a checkpoint on the dataset's target grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Comma-separated evaluation seeds; defaults to $RADT_LAB_SEED, then 0.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Fail unless the checkpoint was trained with this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every variant × seed and tabulate DT-normalized errors.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to full,no-seqra,no-stepra,no-adascale,dt.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Arch>,
        /// Defaults to `[eval] seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention-mass or return-to-go probes of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: ProbeMode,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn env_seed() -> radt_core::Result<u64> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{SEED_VAR}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn seeds_or_default(seeds: Vec<u64>, default: u64) -> Vec<u64> {
    if seeds.is_empty() {
        vec![default]
    } else {
        seeds
    }
}

fn run(command: Command) -> radt_core::Result<Outcome> {
    let default_seed = env_seed()?;
    match command {
        Command::GenData { env, n_traj, seed, out } => {
            commands::gen_data(env, n_traj, seed.unwrap_or(default_seed), &out)?;
        }
        Command::Train { config, out } => commands::train_cmd(&config, out, default_seed)?,
        Command::Eval {
            checkpoint,
            dataset,
            episodes,
            seeds,
            config,
            out,
        } => commands::eval_cmd(
            EvalArgs {
                checkpoint,
                dataset,
                episodes,
                seeds: seeds_or_default(seeds, default_seed),
                config,
                out,
            },
            default_seed,
        )?,
        Command::Ablate {
            config,
            variants,
            seeds,
            jobs,
            out,
        } => {
            return commands::ablate_cmd(
                AblateArgs {
                    config,
                    variants: (!variants.is_empty()).then_some(variants),
                    seeds: (!seeds.is_empty()).then_some(seeds),
                    jobs,
                    out,
                },
                default_seed,
            )
        }
        Command::Probe {
            checkpoint,
            mode,
            dataset,
            episodes,
            seeds,
            out,
        } => commands::probe_cmd(
            ProbeArgs {
                checkpoint,
                mode,
                dataset,
                episodes,
                seeds: seeds_or_default(seeds, default_seed),
                out,
            },
            default_seed,
        )?,
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Integrity(_) | Error::Checkpoint(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
