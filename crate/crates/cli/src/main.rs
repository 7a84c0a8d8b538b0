use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sptx_cli::commands;
use sptx_cli::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "sptx", version, about = "Spatially masked pretraining for multichannel neural recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic session archives to --out.
    Generate,
    /// Pretrain on the sessions in --data; writes a checkpoint and metrics.csv.
    Pretrain,
    /// Linear-probe classification on the test sessions.
    Probe,
    /// Masked channel reconstruction on the test sessions.
    Reconstruct,
    /// Probe and export per-parcel pooling-weight importance.
    Interpret,
    /// Pretrain and probe every encoding x masking scale pair.
    Grid,
    /// Merge results.csv files and recompute the summary rows.
    Eval {
        /// results.csv files to merge.
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    let written = match &cli.command {
        Command::Generate => {
            let dirs = commands::generate(&cfg)?;
            println!("generated {} sessions in {}", dirs.len(), cfg.out.display());
            return Ok(());
        }
        Command::Pretrain => {
            let o = commands::pretrain(&cfg)?;
            println!(
                "pretrained on {} sessions for {} epochs ({} steps)",
                o.sessions.len(),
                o.epochs,
                o.steps
            );
            o.checkpoint
        }
        Command::Probe => commands::probe(&cfg)?,
        Command::Reconstruct => commands::reconstruct(&cfg)?,
        Command::Interpret => commands::interpret(&cfg)?,
        Command::Grid => commands::grid(&cfg)?,
        Command::Eval { inputs } => commands::eval(&cfg, inputs)?,
    };
    println!("wrote {}", written.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(sptx_cli::exit_code(&e) as u8)
        }
    }
}
