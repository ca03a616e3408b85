use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use consensus_prune::campaign::{
    cmd_eval, cmd_prune, cmd_report, cmd_train, CampaignError, ExperimentConfig, PruneOptions,
};

/// Similarity-consensus layer pruning.
#[derive(Debug, Parser)]
#[command(name = "cprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured model from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iteratively remove blocks from a trained checkpoint.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue the campaign already present in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many removals; the campaign stays resumable.
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Evaluate a checkpoint under the configured attack suite.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline report JSON or checkpoint directory to compute deltas against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate report.csv and tradeoff.svg for a campaign directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(ExperimentConfig, PathBuf), CampaignError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CampaignError::Usage("no --out given and the config sets no `out`".into()))?;
    cfg.out = Some(out.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), CampaignError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let (cfg, out) = load(&config, seed, out)?;
            let ckpt = cmd_train(&cfg, &out)?;
            println!("{}", ckpt.display());
        }
        Command::Prune {
            config,
            checkpoint,
            seed,
            out,
            resume,
            halt_after,
        } => {
            let (cfg, out) = load(&config, seed, out)?;
            let state = cmd_prune(&cfg, &checkpoint, &out, &PruneOptions { resume, halt_after })?;
            let last = state.last();
            println!(
                "{:?}: {} removals, {:.2}% FLOP reduction, clean accuracy {:.2}%",
                state.status,
                state.records.len() - 1,
                last.cost.flop_reduction_pct,
                last.robustness.clean_acc
            );
        }
        Command::Eval {
            config,
            checkpoint,
            baseline,
            seed,
            out,
        } => {
            let (cfg, out) = load(&config, seed, out)?;
            let report = cmd_eval(&cfg, &checkpoint, baseline.as_deref(), &out)?;
            println!("clean accuracy {:.2}%", report.clean_acc);
        }
        Command::Report { out } => {
            let state = cmd_report(&out)?;
            println!("{} rows written to {}", state.records.len(), out.join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
