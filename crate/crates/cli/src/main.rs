use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use attnprune_cli::error::EXIT_OK;
use attnprune_cli::{commands, CliError, ExperimentConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnprune", version, about = "Sparse attention pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    In,
    Ood,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, final.ckpt and thresholds.txt.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on a held-out split.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, value_enum, default_value = "in")]
        split: SplitArg,
    },
    /// Export masked attention heatmaps for one evaluation sequence.
    Masks {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "in")]
        split: SplitArg,
    },
    /// Compare autodiff gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = commands::train(&cfg, &mut io::stderr())?;
            writeln!(
                stdout,
                "trained {} steps into {}",
                summary.steps,
                cfg.output_dir.display()
            )?;
        }
        Command::Eval {
            checkpoint,
            config,
            split,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::eval(&checkpoint, &cfg, matches!(split, SplitArg::Ood), &mut stdout)?;
        }
        Command::Masks {
            checkpoint,
            config,
            sample,
            out,
            split,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let files =
                commands::masks(&checkpoint, &cfg, sample, matches!(split, SplitArg::Ood), &out)?;
            writeln!(stdout, "wrote {} files to {}", files.len(), out.display())?;
        }
        Command::Gradcheck { seed } => {
            commands::gradcheck(seed, &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
