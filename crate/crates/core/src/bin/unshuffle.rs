use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unshuffle::cli::{cmd_eval, cmd_gen, cmd_partition, cmd_sweep, cmd_train, ExperimentConfig};
use unshuffle::Result;

#[derive(Parser)]
#[command(name = "unshuffle", version, about = "Multi-environment training with head variance regularization")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark as JSONL files
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Split datasets into training environments
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one model
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score saved models on datasets
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long = "data", required = true)]
        datasets: Vec<PathBuf>,
        /// Average the models' predictions instead of scoring each one
        #[arg(long)]
        ensemble: bool,
        /// Write metrics here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid over lambda, the number of environments or clusters
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::Gen { config, out, force } => {
            let cfg = ExperimentConfig::load(config)?;
            let m = cmd_gen(&cfg, &out, force)?;
            println!("wrote {} training file(s) to {}", m.train.len(), out.display());
        }
        Command::Partition { config, inputs, out, force } => {
            let cfg = ExperimentConfig::load(config)?;
            let s = cmd_partition(&cfg, &inputs, &out, force)?;
            println!("{} environments, sizes {:?}", s.num_envs, s.env_sizes);
        }
        Command::Train { config, force } => {
            let cfg = ExperimentConfig::load(config)?;
            let r = cmd_train(&cfg, force)?;
            println!(
                "best epoch {}: val accuracy {:.4}, ood accuracy {:.4}",
                r.best_epoch,
                r.best_val_accuracy,
                r.ood_accuracy.unwrap_or(f64::NAN)
            );
        }
        Command::Eval { models, datasets, ensemble, out } => {
            let json = cmd_eval(&models, &datasets, ensemble)?.to_json()?;
            match out {
                Some(path) => std::fs::write(&path, json).map_err(|e| unshuffle::Error::io(&path, e))?,
                None => print!("{json}"),
            }
        }
        Command::Sweep { config, force } => {
            let cfg = ExperimentConfig::load(config)?;
            let report = cmd_sweep(&cfg, force)?;
            for row in &report.rows {
                match (row.mean_ood_acc, row.failed) {
                    (Some(ood), false) => println!("{}: mean ood accuracy {:.4}", row.label, ood),
                    _ => println!("{}: failed", row.label),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
