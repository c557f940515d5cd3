use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use dccs_core::metrics::{default_thresholds, evaluate, image_snr, roc, snr_subset, BinaryMask, MetricsReport, DEFAULT_ROC_POINTS};
use dccs_core::pgm::Pgm;

pub const METRICS_CSV: &str = "metrics.csv";
pub const ROC_CSV: &str = "roc.csv";
pub const PER_IMAGE_CSV: &str = "per_image.csv";

const MASK_SUFFIX: &str = "_mask.pgm";

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Directory of predicted `<stem>_mask.pgm` (and optionally
    /// `<stem>_conf.pgm` for the ROC curve).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth `<stem>_mask.pgm` (and optionally the
    /// `<stem>.pgm` images for SNR subsets).
    #[arg(long)]
    gt: PathBuf,
    /// Report directory; defaults to the prediction directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of evenly spaced ROC thresholds in [0, 1].
    #[arg(long, default_value_t = DEFAULT_ROC_POINTS)]
    roc_points: usize,
    /// Upper SNR bounds of the nested difficulty subsets.
    #[arg(long, value_delimiter = ',', default_values_t = [3.0, 4.0, 5.0])]
    snr: Vec<f64>,
}

fn mask_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut stems = BTreeSet::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name();
        if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(MASK_SUFFIX)) {
            stems.insert(stem.to_string());
        }
    }
    Ok(stems)
}

fn read_mask(dir: &Path, stem: &str) -> Result<BinaryMask> {
    let p = dir.join(format!("{stem}{MASK_SUFFIX}"));
    Ok(Pgm::read(&p).with_context(|| format!("reading {}", p.display()))?.to_mask())
}

pub fn run(a: Args) -> Result<ExitCode> {
    let out = a.out.clone().unwrap_or_else(|| a.pred.clone());
    println!(
        "# eval pred={} gt={} out={} roc_points={} snr={:?}",
        a.pred.display(),
        a.gt.display(),
        out.display(),
        a.roc_points,
        a.snr
    );
    let pred_stems = mask_stems(&a.pred)?;
    let gt_stems = mask_stems(&a.gt)?;
    let orphans: Vec<String> = pred_stems
        .symmetric_difference(&gt_stems)
        .map(|s| {
            let side = if pred_stems.contains(s) { "prediction without ground truth" } else { "ground truth without prediction" };
            format!("  {s}{MASK_SUFFIX}: {side}")
        })
        .collect();
    if !orphans.is_empty() {
        bail!("unmatched files:\n{}", orphans.join("\n"));
    }
    if gt_stems.is_empty() {
        bail!("no *{MASK_SUFFIX} files in {}", a.gt.display());
    }
    let stems: Vec<&String> = gt_stems.iter().collect();
    let preds = stems.iter().map(|s| read_mask(&a.pred, s)).collect::<Result<Vec<_>>>()?;
    let gts = stems.iter().map(|s| read_mask(&a.gt, s)).collect::<Result<Vec<_>>>()?;
    let mut report = evaluate(&preds, &gts)?;

    let conf_paths: Vec<PathBuf> = stems.iter().map(|s| a.pred.join(format!("{s}_conf.pgm"))).collect();
    if conf_paths.iter().all(|p| p.is_file()) {
        let maps = conf_paths
            .iter()
            .map(|p| Ok(Pgm::read(p).with_context(|| format!("reading {}", p.display()))?.to_unit_map()))
            .collect::<Result<Vec<_>>>()?;
        report.roc = roc(&maps, &gts, &default_thresholds(a.roc_points))?;
    } else {
        println!("note: confidence maps missing; ROC skipped");
    }

    let image_paths: Vec<PathBuf> = stems.iter().map(|s| a.gt.join(format!("{s}.pgm"))).collect();
    let mut subsets = Vec::new();
    if image_paths.iter().all(|p| p.is_file()) {
        let snrs = image_paths
            .iter()
            .zip(&gts)
            .map(|(p, gt)| {
                let img = Pgm::read(p).with_context(|| format!("reading {}", p.display()))?.to_unit_map();
                Ok(image_snr(&img, gt)?)
            })
            .collect::<Result<Vec<_>>>()?;
        for &tau in &a.snr {
            let idx = snr_subset(&snrs, tau);
            let pick = |v: &[BinaryMask]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            subsets.push((tau, idx.len(), evaluate(&pick(&preds), &pick(&gts))?));
        }
    } else {
        println!("note: ground-truth images missing; SNR subsets skipped");
    }

    print_table(&report, &subsets, stems.len());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_reports(&out, &report, &subsets, &stems)?;
    println!("wrote {}, {} and {}", out.join(METRICS_CSV).display(), out.join(ROC_CSV).display(), out.join(PER_IMAGE_CSV).display());
    Ok(ExitCode::SUCCESS)
}

fn print_table(r: &MetricsReport, subsets: &[(f64, usize, MetricsReport)], n: usize) {
    println!("{:<14} {:>7} {:>8} {:>8} {:>12}", "set", "images", "IoU", "Pd", "Fa (x1e-6)");
    println!("{:<14} {:>7} {:>8.4} {:>8.4} {:>12.2}", "all", n, r.iou, r.pd, r.fa);
    for (tau, count, s) in subsets {
        println!("{:<14} {:>7} {:>8.4} {:>8.4} {:>12.2}", format!("SNR<{tau}"), count, s.iou, s.pd, s.fa);
    }
}

fn write_reports(out: &Path, r: &MetricsReport, subsets: &[(f64, usize, MetricsReport)], stems: &[&String]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join(METRICS_CSV))?;
    w.write_record(["metric", "value"])?;
    let mut row = |k: String, v: String| w.write_record([k, v]);
    row("images".into(), stems.len().to_string())?;
    row("iou".into(), format!("{:?}", r.iou))?;
    row("pd".into(), format!("{:?}", r.pd))?;
    row("fa".into(), format!("{:?}", r.fa))?;
    row("targets".into(), r.totals.targets.to_string())?;
    row("detected".into(), r.totals.detected.to_string())?;
    for (tau, count, s) in subsets {
        row(format!("snr_lt_{tau}_images"), count.to_string())?;
        row(format!("snr_lt_{tau}_iou"), format!("{:?}", s.iou))?;
        row(format!("snr_lt_{tau}_pd"), format!("{:?}", s.pd))?;
        row(format!("snr_lt_{tau}_fa"), format!("{:?}", s.fa))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join(ROC_CSV))?;
    w.write_record(["fpr", "tpr"])?;
    for p in &r.roc {
        w.write_record([format!("{:?}", p.fpr), format!("{:?}", p.tpr)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join(PER_IMAGE_CSV))?;
    w.write_record(["image", "iou", "detected", "targets", "false_pixels", "pixels"])?;
    for (s, c) in stems.iter().zip(&r.per_image) {
        w.write_record([
            s.to_string(),
            format!("{:?}", c.iou()),
            c.detected.to_string(),
            c.targets.to_string(),
            c.false_pixels.to_string(),
            c.pixels.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
