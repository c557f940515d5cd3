use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use dccs_core::metrics::BinaryMask;
use dccs_core::network::config::DOWNSAMPLE;
use dccs_core::network::load_checkpoint;
use dccs_core::pgm::Pgm;
use dccs_core::synth::to_rgb;
use rayon::prelude::*;

/// Confidence above this (strictly) marks a target pixel.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Receives `<stem>_conf.pgm` and `<stem>_mask.pgm` per image.
    #[arg(long)]
    out: PathBuf,
    /// PGM images or directories of them; `*_mask.pgm` and `*_conf.pgm`
    /// files inside directories are skipped.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

pub fn is_derived(name: &str) -> bool {
    name.ends_with("_mask.pgm") || name.ends_with("_conf.pgm")
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut images = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.ends_with(".pgm") && !is_derived(n))
                })
                .collect();
            found.sort();
            images.extend(found);
        } else {
            images.push(p.clone());
        }
    }
    Ok(images)
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("{} has no usable file name", path.display()))
}

pub fn run(a: Args) -> Result<ExitCode> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let images = collect_images(&a.inputs)?;
    println!(
        "# infer checkpoint={} out={} images={} threshold=>{MASK_THRESHOLD}",
        a.checkpoint.display(),
        a.out.display(),
        images.len()
    );
    for line in model.config.to_kv().lines() {
        println!("#   {line}");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let written: Vec<String> = images
        .par_iter()
        .map(|path| -> Result<String> {
            let pgm = Pgm::read(path).with_context(|| format!("reading {}", path.display()))?;
            let (h, w) = (pgm.height, pgm.width);
            if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
                let up = |v: usize| v.div_ceil(DOWNSAMPLE).max(1) * DOWNSAMPLE;
                bail!(
                    "{}: {w}x{h} is not a multiple of {DOWNSAMPLE} on both sides; pad or crop to e.g. {}x{}",
                    path.display(),
                    up(w),
                    up(h)
                );
            }
            let conf = model
                .predict(&to_rgb(&pgm.to_unit_map()))
                .with_context(|| format!("running the model on {}", path.display()))?;
            let name = stem(path)?;
            Pgm::from_unit_map(&conf)?.write(&a.out.join(format!("{name}_conf.pgm")))?;
            Pgm::from_mask(&BinaryMask::above(&conf, MASK_THRESHOLD)?).write(&a.out.join(format!("{name}_mask.pgm")))?;
            Ok(name)
        })
        .collect::<Result<_>>()?;
    for name in &written {
        println!("{name}: wrote {name}_conf.pgm {name}_mask.pgm");
    }
    Ok(ExitCode::SUCCESS)
}
