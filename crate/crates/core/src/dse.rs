//! Dual-stream saliency enhancement block.
//!
//! The input is split into channel halves. The left half goes through a local
//! convolution branch, the right half through a gated four-direction
//! selective-scan branch. Each branch output is scaled by a channel attention
//! computed from that branch's own input with one shared weight set, then the
//! halves are concatenated, shuffled with two groups and added to the input.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ChannelGate, Conv2d, LayerNorm, Ss2d};
use crate::ops::ConvGeometry;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Right-branch width relative to its input.
pub const EXPANSION: usize = 2;

pub fn attention_hidden(channels: usize) -> usize {
    (channels / 8).max(1)
}

#[derive(Clone, Debug)]
pub struct DseBlock {
    pub channels: usize,
    pub local_conv1: Conv2d,
    pub local_conv2: Conv2d,
    pub local_pointwise: Conv2d,
    pub norm_in: LayerNorm,
    pub in_proj: Conv2d,
    pub depthwise: Conv2d,
    pub ss2d: Ss2d,
    pub norm_out: LayerNorm,
    pub gate_proj: Conv2d,
    pub out_proj: Conv2d,
    pub attention: ChannelGate,
}

impl DseBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, state: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::invalid("dse block", format!("channel count {channels} must be even")));
        }
        let half = channels / 2;
        let inner = half * EXPANSION;
        let n = |s: &str| format!("{name}.{s}");
        Ok(DseBlock {
            channels,
            local_conv1: Conv2d::same3(store, rng, &n("local.conv1"), half, half),
            local_conv2: Conv2d::same3(store, rng, &n("local.conv2"), half, half),
            local_pointwise: Conv2d::pointwise(store, rng, &n("local.pw"), half, half),
            norm_in: LayerNorm::new(store, &n("global.norm_in"), half),
            in_proj: Conv2d::pointwise(store, rng, &n("global.in_proj"), half, inner),
            depthwise: Conv2d::new(
                store,
                rng,
                &n("global.dw"),
                inner,
                inner,
                3,
                ConvGeometry::same(3, 1).with_groups(inner),
                true,
            ),
            ss2d: Ss2d::new(store, rng, &n("global.ss2d"), inner, state),
            norm_out: LayerNorm::new(store, &n("global.norm_out"), inner),
            gate_proj: Conv2d::pointwise(store, rng, &n("global.gate"), half, inner),
            out_proj: Conv2d::pointwise(store, rng, &n("global.out_proj"), inner, half),
            attention: ChannelGate::new(store, rng, &n("attention"), half, attention_hidden(channels)),
        })
    }

    /// conv3x3, ReLU, conv3x3, ReLU, pointwise.
    pub fn local_branch(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.local_conv1.forward(g, x)?;
        let y = g.relu(y);
        let y = self.local_conv2.forward(g, y)?;
        let y = g.relu(y);
        self.local_pointwise.forward(g, y)
    }

    /// `out_proj(LN(SS2D(SiLU(dw(in_proj(LN(x)))))) * SiLU(gate(LN(x))))`.
    pub fn global_branch(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y0 = self.norm_in.forward(g, x)?;
        let y = self.in_proj.forward(g, y0)?;
        let y = self.depthwise.forward(g, y)?;
        let y = g.silu(y);
        let y = self.ss2d.forward(g, y)?;
        let y = self.norm_out.forward(g, y)?;
        let gate = self.gate_proj.forward(g, y0)?;
        let gate = g.silu(gate);
        let y = g.mul(y, gate)?;
        self.out_proj.forward(g, y)
    }

    /// Per-sample channel attention from `GAP(x) + GMP(x)`; `N x C/2 x 1 x 1`.
    pub fn shared_attention(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let avg = g.adaptive_avg_pool(x, 1)?;
        let max = g.global_max_pool(x);
        let pooled = g.add(avg, max)?;
        self.attention.forward(g, pooled)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let c = g.shape(x).c;
        if c != self.channels {
            return Err(Error::invalid(
                "dse block",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let half = c / 2;
        let x_l = g.slice_channels(x, 0, half)?;
        let x_r = g.slice_channels(x, half, half)?;
        let y_l = self.local_branch(g, x_l)?;
        let a_l = self.shared_attention(g, x_l)?;
        let y_l = g.mul(y_l, a_l)?;
        let y_r = self.global_branch(g, x_r)?;
        let a_r = self.shared_attention(g, x_r)?;
        let y_r = g.mul(y_r, a_r)?;
        let y = g.concat(&[y_l, y_r])?;
        let y = g.channel_shuffle(y, 2)?;
        g.add(y, x)
    }

    /// Forward without recording gradients.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let local = self.local_conv1.flops(h, w) + self.local_conv2.flops(h, w) + self.local_pointwise.flops(h, w);
        let global = self.in_proj.flops(h, w)
            + self.depthwise.flops(h, w)
            + self.ss2d.flops(h, w)
            + self.gate_proj.flops(h, w)
            + self.out_proj.flops(h, w);
        local + global + 2 * self.attention.flops()
    }
}
