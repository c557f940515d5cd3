use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use dccs_core::synth::{generate_corpus, SceneParams, MANIFEST};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Number of scenes.
    #[arg(long)]
    count: usize,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Scene parameter file (`key=value` lines).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Corpus seed; scene `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene height, overriding the parameter file.
    #[arg(long)]
    height: Option<usize>,
    /// Scene width, overriding the parameter file.
    #[arg(long)]
    width: Option<usize>,
}

pub fn run(a: Args) -> Result<ExitCode> {
    let mut params = match &a.params {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SceneParams::from_kv(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneParams::default(),
    };
    if let Some(h) = a.height {
        params.height = h;
    }
    if let Some(w) = a.width {
        params.width = w;
    }
    params.seed = a.seed;
    println!("# gen count={} out={} seed={}", a.count, a.out.display(), a.seed);
    for line in params.to_kv().lines() {
        println!("#   {line}");
    }
    let entries = generate_corpus(&a.out, a.count, &params, a.seed)
        .with_context(|| format!("generating corpus in {}", a.out.display()))?;
    println!("wrote {} scenes and {}", entries.len(), a.out.join(MANIFEST).display());
    Ok(ExitCode::SUCCESS)
}
