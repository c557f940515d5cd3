use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dccs_core::network::train::{train, TrainOptions, DEFAULT_BATCH, DEFAULT_LR};
use dccs_core::network::{save_checkpoint, Model, ModelConfig};
use dccs_core::synth::{load_corpus, to_rgb};

pub const LOSS_CSV: &str = "loss.csv";
pub const BEST: &str = "best.ckpt";
pub const FINAL: &str = "final.ckpt";

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Corpus manifest (`image,mask,seed`).
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for `loss.csv`, `best.ckpt` and `final.ckpt`.
    #[arg(long)]
    out: PathBuf,
    /// Model config file (`key=value` lines) layered over the tiny config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Seeds both the initialization and the data order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    /// Disable random flips and transposes.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    state_dim: Option<usize>,
}

pub fn run(a: Args) -> Result<ExitCode> {
    let data = load_corpus(&a.corpus).with_context(|| format!("loading {}", a.corpus.display()))?;
    let Some((first, _)) = data.first() else {
        bail!("corpus {} lists no scenes", a.corpus.display());
    };
    let [_, _, h, w] = first.shape().dims();
    if let Some((i, _)) = data.iter().enumerate().find(|(_, (img, _))| img.shape() != first.shape()) {
        bail!("scene {i} is {:?}, expected 1x1x{h}x{w} like scene 0", data[i].0.shape());
    }

    let mut config = ModelConfig {
        input_height: h,
        input_width: w,
        ..ModelConfig::tiny()
    };
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        config = config.overlay_kv(&text).with_context(|| format!("parsing {}", p.display()))?;
        if (config.input_height, config.input_width) != (h, w) {
            bail!(
                "{} sets input {}x{} but the corpus images are {h}x{w}",
                p.display(),
                config.input_height,
                config.input_width
            );
        }
    }
    if let Some(c) = a.base_channels {
        config.base_channels = c;
    }
    if let Some(s) = a.state_dim {
        config.state_dim = s;
    }
    config.validate()?;

    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        augment: !a.no_augment,
        loss_csv: Some(a.out.join(LOSS_CSV)),
        checkpoint_dir: Some(a.out.clone()),
    };
    println!(
        "# train corpus={} scenes={} out={} epochs={} batch_size={} lr={} seed={} augment={}",
        a.corpus.display(),
        data.len(),
        a.out.display(),
        opts.epochs,
        opts.batch_size,
        opts.lr,
        opts.seed,
        opts.augment
    );
    for line in config.to_kv().lines() {
        println!("#   {line}");
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut model = Model::new(config, a.seed)?;
    println!("parameters: {}", model.param_count());
    if opts.epochs == 0 {
        save_checkpoint(&model, &a.out.join(FINAL))?;
        println!("no epochs requested; wrote the initialization to {}", a.out.join(FINAL).display());
        return Ok(ExitCode::SUCCESS);
    }
    let pairs: Vec<_> = data.into_iter().map(|(img, mask)| (to_rgb(&img), mask.to_tensor())).collect();
    let start = Instant::now();
    let summary = train(&mut model, &pairs, &opts, |epoch, loss| {
        println!("epoch {epoch} mean_loss {loss:.6} elapsed {:.1}s", start.elapsed().as_secs_f64());
    })
    .with_context(|| format!("training aborted; {} keeps the best completed epoch", a.out.join(BEST).display()))?;
    println!(
        "best epoch {} (mean loss {:.6}); wrote {}, {} and {}",
        summary.best_epoch,
        summary.epoch_losses[summary.best_epoch],
        a.out.join(LOSS_CSV).display(),
        a.out.join(BEST).display(),
        a.out.join(FINAL).display()
    );
    Ok(ExitCode::SUCCESS)
}
