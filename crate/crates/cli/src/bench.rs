use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use dccs_core::scanbench::{bench_scan, default_lengths, log_log_slope};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Sequence lengths; defaults to 1024, 2048, ..., 65536.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Scan channels.
    #[arg(long, default_value_t = 16)]
    d_inner: usize,
    /// State size.
    #[arg(long, default_value_t = 16)]
    state: usize,
    /// Timed scans per length.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<ExitCode> {
    let lengths = a.lengths.unwrap_or_else(default_lengths);
    eprintln!(
        "# bench lengths={lengths:?} d_inner={} state={} repeats={} seed={}",
        a.d_inner, a.state, a.repeats, a.seed
    );
    let rows = bench_scan(&lengths, a.d_inner, a.state, a.repeats, a.seed)?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["L", "D_inner", "N", "nanos_per_scan"])?;
    for r in &rows {
        w.write_record([r.len.to_string(), r.d_inner.to_string(), r.state.to_string(), r.nanos.to_string()])?;
    }
    w.flush()?;
    match log_log_slope(&rows) {
        Some(s) => eprintln!("log-log slope of time vs L: {s:.4}"),
        None => eprintln!("log-log slope needs at least two lengths"),
    }
    Ok(ExitCode::SUCCESS)
}
