//! Latent-aware semantic extraction and aggregation.
//!
//! Four dilated 3x3 convolutions each produce a quarter of the channels; the
//! concatenation is shuffled with four groups into `y_m`. A channel vector is
//! sampled from `y_m` (one cell of an adaptive average pool with a randomly
//! chosen size in train mode, the global average at inference), turned into
//! channel weights `delta`, and the block returns `x + y_m * delta`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Region, Var};
use crate::error::{Error, Result};
use crate::layers::{ChannelGate, Conv2d};
use crate::ops::pool::adaptive_bounds;
use crate::ops::ConvGeometry;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DILATIONS: [usize; 4] = [1, 2, 3, 4];

/// Candidate pool sizes, indexed by the first draw.
pub const POOL_SIZES: [usize; 3] = [3, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Sample `n` of a batch draws from a stream seeded with `seed ^ n`.
    Train(u64),
    Inference,
}

/// One train-mode choice: the pool size and the cell of the `k x k` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolDraw {
    pub k: usize,
    pub row: usize,
    pub col: usize,
}

/// Uniform index below `n` from one 64-bit draw.
fn below(u: u64, n: usize) -> usize {
    ((u as u128 * n as u128) >> 64) as usize
}

impl PoolDraw {
    /// Consumes exactly two values: the pool size, then the cell.
    pub fn draw(rng: &mut impl RngCore) -> Self {
        let k = POOL_SIZES[below(rng.next_u64(), POOL_SIZES.len())];
        let cell = below(rng.next_u64(), k * k);
        PoolDraw {
            k,
            row: cell / k,
            col: cell % k,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        PoolDraw::draw(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// The input window averaged by this cell on an `h x w` map.
    pub fn region(&self, h: usize, w: usize) -> Region {
        Region {
            rows: adaptive_bounds(h, self.k, self.row),
            cols: adaptive_bounds(w, self.k, self.col),
        }
    }
}

/// Pool regions for every sample of a batch of `n` maps of size `h x w`.
pub fn sample_regions(mode: SampleMode, n: usize, h: usize, w: usize) -> Result<Vec<Region>> {
    match mode {
        SampleMode::Inference => Ok(vec![Region::full(h, w); n]),
        SampleMode::Train(seed) => {
            if h.min(w) < 3 {
                return Err(Error::invalid(
                    "lasea",
                    format!("train-mode sampling needs a map of at least 3x3, got {h}x{w}"),
                ));
            }
            Ok((0..n)
                .map(|i| PoolDraw::from_seed(seed ^ i as u64).region(h, w))
                .collect())
        }
    }
}

#[derive(Clone, Debug)]
pub struct LaseaBlock {
    pub channels: usize,
    pub branches: Vec<Conv2d>,
    pub attention: ChannelGate,
}

impl LaseaBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::invalid(
                "lasea",
                format!("channel count {channels} must be a positive multiple of 4"),
            ));
        }
        let branches = DILATIONS
            .iter()
            .map(|&d| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.dilated{d}"),
                    channels,
                    channels / 4,
                    3,
                    ConvGeometry::same(3, d),
                    true,
                )
            })
            .collect();
        let attention = ChannelGate::new(store, rng, &format!("{name}.attention"), channels, (channels / 8).max(1));
        Ok(LaseaBlock {
            channels,
            branches,
            attention,
        })
    }

    /// Concatenated dilated-branch outputs, before the shuffle.
    pub fn cross_scale(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let parts = self
            .branches
            .iter()
            .map(|b| b.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: SampleMode) -> Result<Var> {
        let s = g.shape(x);
        if s.c != self.channels {
            return Err(Error::invalid(
                "lasea",
                format!("expected {} channels, got {}", self.channels, s.c),
            ));
        }
        let regions = sample_regions(mode, s.n, s.h, s.w)?;
        let y = self.cross_scale(g, x)?;
        let y_m = g.channel_shuffle(y, 4)?;
        let v = g.region_mean(y_m, &regions)?;
        let delta = self.attention.forward(g, v)?;
        let scaled = g.mul(y_m, delta)?;
        g.add(x, scaled)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor, mode: SampleMode) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv, mode)?;
        Ok(g.value(y).clone())
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.branches.iter().map(|b| b.flops(h, w)).sum::<u64>() + self.attention.flops()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph_gradients, check_param_gradients, GradcheckOptions};
    use crate::ops;
    use crate::tensor::Shape;

    fn block(c: usize, seed: u64) -> (ParamStore, LaseaBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = LaseaBlock::new(&mut store, &mut rng, "lasea", c).unwrap();
        (store, b)
    }

    #[test]
    fn draw_consumes_two_values_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let u1 = rng.next_u64();
        let u2 = rng.next_u64();
        let k = POOL_SIZES[((u1 as u128 * 3) >> 64) as usize];
        let cell = ((u2 as u128 * (k * k) as u128) >> 64) as usize;
        let d = PoolDraw::from_seed(77);
        assert_eq!((d.k, d.row * k + d.col), (k, cell));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        PoolDraw::draw(&mut rng);
        let mut reference = ChaCha8Rng::seed_from_u64(77);
        reference.next_u64();
        reference.next_u64();
        assert_eq!(rng.next_u64(), reference.next_u64());
    }

    #[test]
    fn inference_is_global_mean() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::standalone();
        let xv = g.input(x);
        let r = sample_regions(SampleMode::Inference, 1, 2, 2).unwrap();
        let v = g.region_mean(xv, &r).unwrap();
        assert_eq!(g.value(v).data(), &[2.5]);
    }

    #[test]
    fn train_mode_rejects_small_maps() {
        assert!(sample_regions(SampleMode::Train(0), 1, 2, 5).is_err());
        assert!(sample_regions(SampleMode::Inference, 1, 2, 2).is_ok());
    }

    #[test]
    fn sampled_vector_is_adaptive_pool_cell() {
        let (store, b) = block(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(Shape::new(1, 8, 7, 5), -1.0, 1.0, &mut rng);
        for seed in 0..20 {
            let d = PoolDraw::from_seed(seed);
            let mut g = Graph::inference(&store);
            let xv = g.input(x.clone());
            let y = b.cross_scale(&mut g, xv).unwrap();
            let y_m = g.channel_shuffle(y, 4).unwrap();
            let r = sample_regions(SampleMode::Train(seed), 1, 7, 5).unwrap();
            let v = g.region_mean(y_m, &r).unwrap();
            let pooled = ops::adaptive_avg_pool(g.value(y_m), d.k).unwrap();
            for c in 0..8 {
                let want = pooled.at(0, c, d.row, d.col);
                assert!((g.value(v).at(0, c, 0, 0) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn k_one_draw_equals_inference() {
        let (store, b) = block(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(Shape::new(1, 8, 6, 6), -1.0, 1.0, &mut rng);
        let seed = (0..).find(|&s| PoolDraw::from_seed(s).k == 1).unwrap();
        assert_eq!(
            b.apply(&store, &x, SampleMode::Train(seed)).unwrap(),
            b.apply(&store, &x, SampleMode::Inference).unwrap()
        );
    }

    #[test]
    fn zero_weights_give_identity_in_both_modes() {
        let (mut store, b) = block(8, 4);
        store.zero_all();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(Shape::new(2, 8, 5, 4), -2.0, 2.0, &mut rng);
        assert_eq!(b.apply(&store, &x, SampleMode::Inference).unwrap(), x);
        assert_eq!(b.apply(&store, &x, SampleMode::Train(9)).unwrap(), x);
    }

    #[test]
    fn constant_input_all_ones_kernels_interior() {
        let (mut store, b) = block(4, 0);
        for br in &b.branches {
            store.get_mut(br.weight).fill(1.0);
        }
        let x = Tensor::full(Shape::new(1, 4, 11, 11), 0.5);
        let mut g = Graph::inference(&store);
        let xv = g.input(x);
        let y = b.cross_scale(&mut g, xv).unwrap();
        // 9 taps x 4 input channels x 0.5, for every dilation at the centre
        for c in 0..4 {
            assert_eq!(g.value(y).at(0, c, 5, 5), 18.0);
        }
    }

    #[test]
    fn channel_count_must_divide_by_four() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LaseaBlock::new(&mut store, &mut rng, "l", 6).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_in_train_mode() {
        let (store, b) = block(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(Shape::new(1, 8, 6, 6), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(x.shape(), -1.0, 1.0, &mut rng);
        let seed = (0..).find(|&s| PoolDraw::from_seed(s).k == 3).unwrap();
        let report = check_param_gradients(
            &store,
            &[],
            |g| {
                let xv = g.input(x.clone());
                let wv = g.input(w.clone());
                let y = b.forward(g, xv, SampleMode::Train(seed))?;
                let y = g.mul(y, wv)?;
                Ok(g.sum(y))
            },
            &GradcheckOptions::default().probes(6),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn pooling_gradient_confined_to_selected_cell() {
        let d = PoolDraw { k: 3, row: 2, col: 0 };
        let region = d.region(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut rng);
        let report = check_graph_gradients(
            &[x],
            |g, v| {
                let m = g.region_mean(v[0], &[region])?;
                let m = g.sigmoid(m);
                Ok(g.sum(m))
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(1e-6));
        let mut g = Graph::standalone();
        let xv = g.variable(Tensor::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut rng));
        let m = g.region_mean(xv, &[region]).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        let gx = grads.of(xv).unwrap();
        for h in 0..6 {
            for w in 0..6 {
                let inside = (4..6).contains(&h) && (0..2).contains(&w);
                assert_eq!(gx.at(0, 0, h, w) != 0.0, inside);
            }
        }
    }
}
