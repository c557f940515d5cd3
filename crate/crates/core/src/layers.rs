//! Parameterized building blocks that register their tensors in a
//! [`ParamStore`] and run forward on a [`Graph`].

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::ops::{Activation, ConvGeometry};
use crate::params::{kaiming, ParamId, ParamStore};
use crate::ssm::{initial_delta_bias, ScanDirection};
use crate::tensor::{Shape, Tensor};

/// Square convolution with optional bias. Biases start at zero.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
    ) -> Self {
        let shape = Shape::new(out_channels, in_channels / geometry.groups, kernel, kernel);
        let weight = store.add(format!("{name}.weight"), kaiming(shape, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_channels, 1, 1))));
        Conv2d {
            weight,
            bias,
            geometry,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// 3x3 "same" convolution with bias.
    pub fn same3(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Conv2d::new(store, rng, name, cin, cout, 3, ConvGeometry::same(3, 1), true)
    }

    /// 1x1 convolution with bias, i.e. a per-pixel linear map.
    pub fn pointwise(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Conv2d::new(store, rng, name, cin, cout, 1, ConvGeometry::same(1, 1), true)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geometry)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |len| self.geometry.output_len(len, self.kernel).unwrap_or(0);
        (o(h), o(w))
    }

    /// `2 * MACs` for one sample of spatial size `h x w`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_size(h, w);
        let per_out = self.in_channels / self.geometry.groups * self.kernel * self.kernel;
        2 * (self.out_channels * oh * ow * per_out) as u64
    }
}

/// Channel layer norm with affine parameters initialized to `(1, 0)`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(s, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Group normalization with a per-channel affine, initialized to the identity
/// affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Largest group count of at most [`GroupNorm::MAX_GROUPS`] that divides
    /// `channels`.
    pub const MAX_GROUPS: usize = 4;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        let groups = (1..=Self::MAX_GROUPS.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(s, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s)),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, self.groups, gamma, beta)
    }
}

/// Parameters of one scan direction: `A = -exp(a_log)`, a full-rank
/// `delta` projection with bias, bias-free `B`/`C` projections and the skip.
#[derive(Clone, Debug)]
pub struct SelectiveScan {
    pub direction: ScanDirection,
    pub a_log: ParamId,
    pub delta: Conv2d,
    pub proj_b: Conv2d,
    pub proj_c: Conv2d,
    pub skip: ParamId,
    pub channels: usize,
    pub state: usize,
}

impl SelectiveScan {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        direction: ScanDirection,
        channels: usize,
        state: usize,
    ) -> Self {
        let a_log = Tensor::from_fn(Shape::new(channels, state, 1, 1), |_, s, _, _| ((s + 1) as f64).ln());
        let a_log = store.add(format!("{name}.a_log"), a_log);
        let delta = Conv2d::pointwise(store, rng, &format!("{name}.delta"), channels, channels);
        let bias = delta.bias.expect("delta projection has a bias");
        store.get_mut(bias).fill(initial_delta_bias());
        let unit = ConvGeometry::same(1, 1);
        let proj_b = Conv2d::new(store, rng, &format!("{name}.proj_b"), channels, state, 1, unit, false);
        let proj_c = Conv2d::new(store, rng, &format!("{name}.proj_c"), channels, state, 1, unit, false);
        let skip = store.add(format!("{name}.skip"), Tensor::full(Shape::new(1, channels, 1, 1), 1.0));
        SelectiveScan {
            direction,
            a_log,
            delta,
            proj_b,
            proj_c,
            skip,
            channels,
            state,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let pre = self.delta.forward(g, x)?;
        let delta = g.activate(pre, Activation::Softplus);
        let b = self.proj_b.forward(g, x)?;
        let c = self.proj_c.forward(g, x)?;
        let a_log = g.param(self.a_log);
        let a = g.neg_exp(a_log);
        let skip = g.param(self.skip);
        g.scan(self.direction, x, delta, a, b, c, skip)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.delta.flops(h, w)
            + self.proj_b.flops(h, w)
            + self.proj_c.flops(h, w)
            + crate::ssm::scan_flops(h * w, self.channels, self.state)
    }
}

/// Four-direction selective scan; the directional outputs are summed.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub scans: Vec<SelectiveScan>,
}

impl Ss2d {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, state: usize) -> Self {
        let scans = ScanDirection::ALL
            .into_iter()
            .map(|d| SelectiveScan::new(store, rng, &format!("{name}.{}", d.label()), d, channels, state))
            .collect();
        Ss2d { scans }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for scan in &self.scans {
            let y = scan.forward(g, x)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("four directions"))
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.scans.iter().map(|s| s.flops(h, w)).sum()
    }
}

/// `sigmoid(expand(relu(reduce(v))))` on an `N x C x 1 x 1` vector.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl ChannelGate {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, hidden: usize) -> Self {
        ChannelGate {
            reduce: Conv2d::pointwise(store, rng, &format!("{name}.reduce"), channels, hidden),
            expand: Conv2d::pointwise(store, rng, &format!("{name}.expand"), hidden, channels),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, v: Var) -> Result<Var> {
        let h = self.reduce.forward(g, v)?;
        let h = g.relu(h);
        let h = self.expand.forward(g, h)?;
        Ok(g.sigmoid(h))
    }

    pub fn flops(&self) -> u64 {
        self.reduce.flops(1, 1) + self.expand.flops(1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{s6_scan, ScanParams, Sequence};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lone_conv_param_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv2d::same3(&mut store, &mut rng, "c", 16, 16);
        assert_eq!(store.scalar_count(), 2320);
    }

    #[test]
    fn conv_flops_match_graph_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut store, &mut rng, "c", 4, 6, 2, ConvGeometry::same(2, 1).with_stride(2), true);
        let down = Conv2d::new(&mut store, &mut rng, "d", 4, 4, 3, ConvGeometry::same(3, 2).with_groups(4), false);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(Shape::new(1, 4, 8, 6)));
        conv.forward(&mut g, x).unwrap();
        down.forward(&mut g, x).unwrap();
        assert_eq!(g.flops(), conv.flops(8, 6) + down.flops(8, 6));
    }

    #[test]
    fn initial_scan_matches_sequence_kernel() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = SelectiveScan::new(&mut store, &mut rng, "s", ScanDirection::HorizontalForward, 3, 4);
        let x = Tensor::uniform(Shape::new(1, 3, 1, 7), -1.0, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let y = layer.forward(&mut g, xv).unwrap();
        assert_eq!(g.flops(), layer.flops(1, 7));

        let p = ScanParams {
            a_log: store.get(layer.a_log).clone(),
            w_delta: store.get(layer.delta.weight).clone(),
            b_delta: store.get(layer.delta.bias.unwrap()).clone(),
            w_b: store.get(layer.proj_b.weight).clone(),
            w_c: store.get(layer.proj_c.weight).clone(),
            d_skip: store.get(layer.skip).clone(),
        };
        let seq = Sequence::from_fn(3, 7, |d, t| x.at(0, d, 0, t));
        let want = s6_scan(&seq, &p).unwrap();
        for d in 0..3 {
            for t in 0..7 {
                assert!((g.value(y).at(0, d, 0, t) - want.at(d, t)).abs() < 1e-12);
            }
        }
    }
}
