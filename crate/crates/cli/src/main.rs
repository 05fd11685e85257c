//! `smarc`: masking, training, evaluation, benchmarking and single-image
//! reconstruction.

mod bench;
mod common;
mod eval;
mod manifest;
mod mask;
mod reconstruct;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smarc_core::SmarcError;

#[derive(Parser, Debug)]
#[command(name = "smarc", version, about = "Surface reconstruction and material classification from a central patch")]
struct Cli {
    /// Worker threads for data loading and compute kernels.
    #[arg(long, global = true, env = "SMARC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write centrally masked copies of every image plus the mask itself.
    Mask(mask::MaskArgs),
    /// Split, warm up the head, fine-tune end to end, keep the best epoch.
    Train(train::TrainArgs),
    /// Score a checkpoint on one split and write a report and image grids.
    Eval(eval::EvalArgs),
    /// Time single-image forward passes.
    Bench(bench::BenchArgs),
    /// Reconstruct and classify a single image.
    Reconstruct(reconstruct::ReconstructArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Mask(a) => mask::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Reconstruct(a) => reconstruct::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<SmarcError>(), Some(SmarcError::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
