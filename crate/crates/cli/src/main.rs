//! `blade`: dataset generation, training, evolution, evaluation and the
//! image-processing applications.

mod cmd;
mod common;
mod manifest;

use std::process::ExitCode;

use blade_core::BladeError;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "blade", version, about = "Learned adaptive filters for image PDEs")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reference solutions, subsampled in space and time, one per input image.
    GenData(cmd::gen_data::Args),
    /// Fit a filter bank to a generated dataset.
    Train(cmd::train::Args),
    /// Evolve an image with a trained bank.
    Evolve(cmd::evolve::Args),
    /// Per-frame PSNR/SSIM of a sequence against a reference sequence.
    Eval(cmd::eval::Args),
    /// Deconvolution, upscaling, segmentation and resampling.
    #[command(subcommand)]
    Apply(cmd::apply::Command),
    /// Fit the x/y derivative banks used by `apply resample`.
    TrainResampler(cmd::resampler::TrainArgs),
    /// Write a flow field file.
    MakeFlow(cmd::resampler::FlowArgs),
    /// Run a reference scheme on one image.
    Solve(cmd::solve::Args),
}

/// 1 for instability or divergence anywhere in the error chain, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<BladeError>().is_some_and(BladeError::is_numerical));
    if numerical {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match cli.command {
        Command::GenData(a) => cmd::gen_data::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::Evolve(a) => cmd::evolve::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::Apply(c) => cmd::apply::run(c),
        Command::TrainResampler(a) => cmd::resampler::train(a),
        Command::MakeFlow(a) => cmd::resampler::make_flow(a),
        Command::Solve(a) => cmd::solve::run(a),
    }
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
