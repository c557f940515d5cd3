//! `dccs`: generate synthetic corpora, train, infer, evaluate, check
//! gradients and benchmark the scan.

mod bench;
mod eval;
mod gen;
mod gradcheck;
mod infer;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dccs", version, about = "Infrared small-target detection toolkit")]
struct Cli {
    /// Worker threads for per-sample parallelism (0 = all cores).
    #[arg(long, env = "DCCS_THREADS", default_value_t = 0, global = true)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with a manifest.
    Gen(gen::Args),
    /// Train a model on a corpus manifest.
    Train(train::Args),
    /// Write confidence maps and masks for images.
    Infer(infer::Args),
    /// Score predicted masks against ground truth.
    Eval(eval::Args),
    /// Run finite-difference gradient suites.
    Gradcheck(gradcheck::Args),
    /// Time the selective scan against sequence length.
    Bench(bench::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
