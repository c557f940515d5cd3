use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lasea::SampleMode;
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

use super::checkpoint::save_checkpoint;
use super::model::Model;

pub const SOFT_IOU_EPS: f64 = 1.0;
pub const DEFAULT_LR: f64 = 0.05;
pub const ADAGRAD_EPS: f64 = 1e-10;
pub const DEFAULT_BATCH: usize = 4;

/// Mask max-pooled `levels - 1` times, finest first.
pub fn mask_pyramid(mask: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("loss", "ground-truth mask must be binary"));
    }
    let mut out = vec![mask.clone()];
    for _ in 1..levels {
        let (next, _) = ops::max_pool2(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Weighted soft-IoU over the supervised maps.
pub fn supervision_loss(g: &mut Graph<'_>, maps: &[Var], mask: &Tensor, weights: &[f64]) -> Result<Var> {
    if maps.len() != weights.len() {
        return Err(Error::invalid(
            "loss",
            format!("{} maps for {} weights", maps.len(), weights.len()),
        ));
    }
    let targets = mask_pyramid(mask, maps.len())?;
    let mut terms = Vec::with_capacity(maps.len());
    for ((&m, t), &w) in maps.iter().zip(&targets).zip(weights) {
        terms.push((g.soft_iou_loss(m, t, SOFT_IOU_EPS)?, w));
    }
    g.weighted_sum(&terms)
}

/// Loss value and per-parameter gradients for one `(image, mask)` pair.
pub fn sample_gradients(model: &Model, image: &Tensor, mask: &Tensor, mode: SampleMode) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(&model.store);
    let x = g.input(image.clone());
    let maps = model.forward(&mut g, x, mode)?;
    let loss = supervision_loss(&mut g, &maps, mask, &model.config.loss_weights)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    let grads = g.backward(loss)?;
    Ok((value, grads.into_param_grads(&model.store)))
}

/// `theta -= lr * g / sqrt(G + eps)` with `G` the running sum of squares.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaGrad {
    pub lr: f64,
    pub eps: f64,
    pub accum: Vec<Tensor>,
}

impl AdaGrad {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        AdaGrad {
            lr,
            eps: ADAGRAD_EPS,
            accum: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Applies one update. Non-finite gradients leave both the parameters and
    /// the accumulators untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.accum.len() {
            return Err(Error::invalid("adagrad", "gradient count differs from parameter count"));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = store.name(store.ids().nth(i).expect("index in range")).to_string();
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        for ((id, acc), g) in store.ids().collect::<Vec<_>>().into_iter().zip(&mut self.accum).zip(grads) {
            let theta = store.get_mut(id);
            for ((p, a), &gv) in theta.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                *a += gv * gv;
                *p -= self.lr * gv / (*a + self.eps).sqrt();
            }
        }
        Ok(())
    }
}

/// One optimizer step over a batch. Per-sample gradients are computed
/// independently (in parallel when threads are available) and summed in
/// sample order. Sample `i` uses train-mode seed `step_seed ^ i`.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdaGrad,
    batch: &[(Tensor, Tensor)],
    step_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("train step", "empty batch"));
    }
    let m: &Model = model;
    let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (img, mask))| sample_gradients(m, img, mask, SampleMode::Train(step_seed ^ i as u64)))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let mut grads = sum.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.scale(scale));
    let loss = total_loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }
    opt.step(&mut model.store, &grads)?;
    Ok(loss)
}

/// One of the eight flips / quarter turns, applied to every channel.
pub fn augment(t: &Tensor, code: u8) -> Tensor {
    let s = t.shape();
    let transpose = code & 4 != 0;
    let (oh, ow) = if transpose { (s.w, s.h) } else { (s.h, s.w) };
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, x| {
        let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
        if code & 1 != 0 {
            sx = s.w - 1 - sx;
        }
        if code & 2 != 0 {
            sy = s.h - 1 - sy;
        }
        t.at(n, c, sy, sx)
    })
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    /// Receives `epoch,step,loss` rows when set.
    pub loss_csv: Option<PathBuf>,
    /// Receives `best.ckpt` (lowest epoch-mean loss) and `final.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            seed: 0,
            augment: true,
            loss_csv: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Full training loop. The data order, augmentations and sampling seeds come
/// from one stream seeded with `opts.seed`, so equal seeds give equal runs.
pub fn train(
    model: &mut Model,
    data: &[(Tensor, Tensor)],
    opts: &TrainOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainSummary> {
    if data.is_empty() || opts.batch_size == 0 {
        return Err(Error::invalid("train", "need at least one sample and a positive batch size"));
    }
    let mut opt = AdaGrad::new(&model.store, opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut csv = match &opts.loss_csv {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    if let Some(w) = &mut csv {
        w.write_record(["epoch", "step", "loss"])?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut summary = TrainSummary {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        best_epoch: 0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<(Tensor, Tensor)> = chunk
                .iter()
                .map(|&i| {
                    let (img, mask) = &data[i];
                    if opts.augment {
                        let code = rng.random_range(0..8u8);
                        (augment(img, code), augment(mask, code))
                    } else {
                        (img.clone(), mask.clone())
                    }
                })
                .collect();
            let step_seed = rng.next_u64();
            let loss = train_step(model, &mut opt, &batch, step_seed)?;
            if let Some(w) = &mut csv {
                w.write_record([epoch.to_string(), step.to_string(), format!("{loss:.17e}")])?;
            }
            summary.step_losses.push(loss);
            epoch_sum += loss;
            batches += 1;
            step += 1;
        }
        let mean = epoch_sum / batches as f64;
        summary.epoch_losses.push(mean);
        let best = summary.epoch_losses[summary.best_epoch];
        if mean < best || epoch == 0 {
            summary.best_epoch = epoch;
            if let Some(dir) = &opts.checkpoint_dir {
                save_checkpoint(model, &dir.join("best.ckpt"))?;
            }
        }
        progress(epoch, mean);
    }
    if let Some(w) = &mut csv {
        w.flush().map_err(|e| Error::io(opts.loss_csv.as_deref().unwrap_or(Path::new("")), e))?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(model, &dir.join("final.ckpt"))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph_gradients, GradcheckOptions};
    use crate::network::ModelConfig;

    #[test]
    fn adagrad_first_step_by_hand() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        let mut opt = AdaGrad::new(&store, DEFAULT_LR);
        opt.step(&mut store, &[Tensor::scalar(3.0)]).unwrap();
        assert!((store.get(id).data()[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::full(Shape::new(1, 1, 2, 2), 0.3));
        let before = store.clone();
        let mut opt = AdaGrad::new(&store, DEFAULT_LR);
        opt.step(&mut store, &[Tensor::zeros(Shape::new(1, 1, 2, 2))]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn non_finite_gradient_rejected_without_change() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0));
        let before = store.clone();
        let mut opt = AdaGrad::new(&store, DEFAULT_LR);
        let acc_before = opt.clone();
        assert!(opt.step(&mut store, &[Tensor::scalar(f64::NAN)]).is_err());
        assert_eq!(store, before);
        assert_eq!(opt, acc_before);
    }

    #[test]
    fn soft_iou_perfect_and_disjoint() {
        let mask = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, _| (h < 2) as u8 as f64);
        let mut g = Graph::standalone();
        let p = g.input(mask.clone());
        let l = g.soft_iou_loss(p, &mask, SOFT_IOU_EPS).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let q = g.input(mask.map(|v| 1.0 - v));
        let l = g.soft_iou_loss(q, &mask, SOFT_IOU_EPS).unwrap();
        // 1 - 1 / 17
        assert!((g.value(l).data()[0] - 16.0 / 17.0).abs() < 1e-15);
    }

    #[test]
    fn soft_iou_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::uniform(Shape::new(1, 1, 4, 5), 0.0, 1.0, &mut rng);
        let mask = Tensor::from_fn(p.shape(), |_, _, h, w| ((h + w) % 3 == 0) as u8 as f64);
        let report = check_graph_gradients(
            &[p],
            |g, v| g.soft_iou_loss(v[0], &mask, SOFT_IOU_EPS),
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(1e-7), "{report:?}");
    }

    #[test]
    fn pyramid_max_pools_and_rejects_soft_masks() {
        let mut mask = Tensor::zeros(Shape::new(1, 1, 8, 8));
        mask.set(0, 0, 5, 2, 1.0);
        let pyr = mask_pyramid(&mask, 4).unwrap();
        assert_eq!(pyr[3].shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(pyr[1].at(0, 0, 2, 1), 1.0);
        assert_eq!(pyr[3].data(), &[1.0]);
        mask.set(0, 0, 0, 0, 0.5);
        assert!(mask_pyramid(&mask, 2).is_err());
    }

    #[test]
    fn augment_codes_are_distinct_symmetries() {
        let t = Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, h, w| (h * 3 + w) as f64);
        let outs: Vec<Tensor> = (0..8).map(|c| augment(&t, c)).collect();
        assert_eq!(outs[0], t);
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(outs[i], outs[j]);
            }
            let mut v = outs[i].data().to_vec();
            v.sort_by(f64::total_cmp);
            assert_eq!(v, t.data());
        }
    }

    #[test]
    fn train_step_decreases_loss_on_fixed_batch() {
        let cfg = ModelConfig {
            base_channels: 4,
            dse_depths: [1, 0, 0, 1],
            state_dim: 4,
            input_height: 48,
            input_width: 48,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform(Shape::new(1, 3, 48, 48), 0.0, 1.0, &mut rng);
        let mask = Tensor::from_fn(Shape::new(1, 1, 48, 48), |_, _, h, w| {
            ((20..26).contains(&h) && (10..15).contains(&w)) as u8 as f64
        });
        let batch = vec![(img, mask)];
        let mut opt = AdaGrad::new(&model.store, DEFAULT_LR);
        let losses: Vec<f64> = (0..8)
            .map(|s| train_step(&mut model, &mut opt, &batch, s).unwrap())
            .collect();
        assert!(losses[7] < losses[0], "{losses:?}");
        assert!(model.store.all_finite());
    }
}
