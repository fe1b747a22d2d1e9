//! `vidpred`: dataset generation, training, evaluation and sampling.

mod config;
mod datagen;
mod error;
mod eval;
mod render;
mod sample;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "vidpred", version, about = "Stochastic video prediction with decomposed motion and appearance states")]
struct Cli {
    /// Root directory for everything the command writes.
    #[arg(long, global = true, env = "VIDPRED_OUT", default_value = ".")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic video dataset.
    Datagen(datagen::Args),
    /// Train a model, or continue training from a checkpoint.
    Train(train::Args),
    /// Multi-sample evaluation with per-step PSNR/SSIM curves.
    Eval(eval::Args),
    /// Render ground truth and sampled rollouts as PNG strips and GIFs.
    Sample(sample::Args),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Datagen(args) => datagen::run(&cli.out_root, args),
        Command::Train(args) => train::run(&cli.out_root, args),
        Command::Eval(args) => eval::run(&cli.out_root, args),
        Command::Sample(args) => sample::run(&cli.out_root, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            if e.code == error::USAGE {
                eprintln!("run `vidpred help` for usage");
            }
            ExitCode::from(e.code)
        }
    }
}
