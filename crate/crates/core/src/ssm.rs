//! Selective state-space scan (S6) and its four-direction 2-D form (SS2D).
//!
//! Per step `t` and channel `d`, with a diagonal state of size `N`:
//!
//! ```text
//! delta_t = softplus(W_delta x_t + b_delta)          (per channel)
//! B_t     = W_B x_t,  C_t = W_C x_t                  (N values)
//! h_t     = exp(delta_t A) * h_{t-1} + delta_t B_t x_t
//! y_t     = C_t . h_t + D x_t
//! ```
//!
//! `A = -exp(a_log)` keeps every decay factor inside `(0, 1)`. `h_0 = 0`.
//! The scan is a single sequential pass, `O(L * D * N)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, softplus, Activation};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_STATE_DIM: usize = 16;

/// Initial step size produced by `softplus(b_delta)` before training.
pub const INITIAL_DELTA: f64 = 0.1;

/// `softplus^-1(INITIAL_DELTA)`.
pub fn initial_delta_bias() -> f64 {
    INITIAL_DELTA.exp_m1().ln()
}

/// Zero-order-hold discretization of one diagonal state entry: returns
/// `(exp(delta * a), delta)`, the decay and the input scale applied to `B`.
pub fn discretize(a: f64, delta: f64) -> (f64, f64) {
    ((delta * a).exp(), delta)
}

/// Parameters of one selective scan over `channels` with `state_dim` states.
///
/// Shapes (all stored as tensors so they can live in a parameter store):
/// `a_log: D x N x 1 x 1`, `w_delta: D x D x 1 x 1`, `b_delta: 1 x D x 1 x 1`,
/// `w_b, w_c: N x D x 1 x 1`, `d_skip: 1 x D x 1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams {
    pub a_log: Tensor,
    pub w_delta: Tensor,
    pub b_delta: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub d_skip: Tensor,
}

impl ScanParams {
    pub fn shapes(channels: usize, state_dim: usize) -> [Shape; 6] {
        [
            Shape::new(channels, state_dim, 1, 1),
            Shape::new(channels, channels, 1, 1),
            Shape::new(1, channels, 1, 1),
            Shape::new(state_dim, channels, 1, 1),
            Shape::new(state_dim, channels, 1, 1),
            Shape::new(1, channels, 1, 1),
        ]
    }

    /// Standard initialization: `A[d, n] = -(n + 1)`, step size near
    /// [`INITIAL_DELTA`], fan-in scaled projections, unit skip gain.
    pub fn init(channels: usize, state_dim: usize, rng: &mut impl Rng) -> Self {
        let [sa, sd, sbd, sb, sc, sk] = Self::shapes(channels, state_dim);
        let bound = 1.0 / (channels as f64).sqrt();
        ScanParams {
            a_log: Tensor::from_fn(sa, |_, n, _, _| ((n + 1) as f64).ln()),
            w_delta: Tensor::uniform(sd, -bound, bound, rng),
            b_delta: Tensor::full(sbd, initial_delta_bias()),
            w_b: Tensor::uniform(sb, -bound, bound, rng),
            w_c: Tensor::uniform(sc, -bound, bound, rng),
            d_skip: Tensor::full(sk, 1.0),
        }
    }

    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        let [sa, sd, sbd, sb, sc, sk] = Self::shapes(channels, state_dim);
        ScanParams {
            a_log: Tensor::zeros(sa),
            w_delta: Tensor::zeros(sd),
            b_delta: Tensor::zeros(sbd),
            w_b: Tensor::zeros(sb),
            w_c: Tensor::zeros(sc),
            d_skip: Tensor::zeros(sk),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape().n
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape().c
    }

    /// The (strictly negative) diagonal state matrix, `D x N`.
    pub fn a_matrix(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -v.exp()).collect()
    }

    pub fn param_count(&self) -> usize {
        [&self.a_log, &self.w_delta, &self.b_delta, &self.w_b, &self.w_c, &self.d_skip]
            .iter()
            .map(|t| t.numel())
            .sum()
    }

    fn check(&self) -> Result<()> {
        let expect = Self::shapes(self.channels(), self.state_dim());
        let got = [
            self.a_log.shape(),
            self.w_delta.shape(),
            self.b_delta.shape(),
            self.w_b.shape(),
            self.w_c.shape(),
            self.d_skip.shape(),
        ];
        for (e, g) in expect.iter().zip(&got) {
            if e != g {
                return Err(Error::shape("scan params", &e.dims(), &g.dims()));
            }
        }
        Ok(())
    }
}

/// A `channels x len` sequence, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Sequence {
    pub fn zeros(channels: usize, len: usize) -> Self {
        Sequence {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_fn(channels: usize, len: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * len);
        for d in 0..channels {
            for t in 0..len {
                data.push(f(d, t));
            }
        }
        Sequence {
            channels,
            len,
            data,
        }
    }

    #[inline]
    pub fn at(&self, d: usize, t: usize) -> f64 {
        self.data[d * self.len + t]
    }

    fn to_time_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for d in 0..self.channels {
            for t in 0..self.len {
                out[t * self.channels + d] = self.data[d * self.len + t];
            }
        }
        out
    }

    fn from_time_major(channels: usize, len: usize, tm: &[f64]) -> Self {
        Sequence::from_fn(channels, len, |d, t| tm[t * channels + d])
    }
}

/// Time-major operands of one scan. `x`, `delta`: `L x D`; `b`, `c`: `L x N`;
/// `a`: `D x N`; `skip`: `D`.
pub(crate) struct ScanOperands<'a> {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub skip: &'a [f64],
}

/// Hidden states `h_t` and decays `exp(delta_t A)`, each `L x D x N`.
pub(crate) struct ScanTrace {
    pub states: Vec<f64>,
    pub decays: Vec<f64>,
}

/// The sequential recurrence. Returns `y` (`L x D`) and, if requested, the
/// per-step trace needed for the backward pass.
pub(crate) fn scan_forward(op: &ScanOperands<'_>, keep_trace: bool) -> (Vec<f64>, Option<ScanTrace>) {
    let (l, dch, ns) = (op.len, op.channels, op.state);
    let mut h = vec![0.0; dch * ns];
    let mut y = vec![0.0; l * dch];
    let mut trace = keep_trace.then(|| ScanTrace {
        states: Vec::with_capacity(l * dch * ns),
        decays: Vec::with_capacity(l * dch * ns),
    });
    let mut decay = vec![0.0; ns];
    for t in 0..l {
        let bt = &op.b[t * ns..(t + 1) * ns];
        let ct = &op.c[t * ns..(t + 1) * ns];
        for d in 0..dch {
            let xv = op.x[t * dch + d];
            let dl = op.delta[t * dch + d];
            let ad = &op.a[d * ns..(d + 1) * ns];
            let hd = &mut h[d * ns..(d + 1) * ns];
            let dx = dl * xv;
            let mut acc = 0.0;
            for n in 0..ns {
                let e = (dl * ad[n]).exp();
                decay[n] = e;
                hd[n] = e * hd[n] + dx * bt[n];
                acc += ct[n] * hd[n];
            }
            y[t * dch + d] = acc + op.skip[d] * xv;
            if let Some(tr) = trace.as_mut() {
                tr.states.extend_from_slice(hd);
                tr.decays.extend_from_slice(&decay);
            }
        }
    }
    (y, trace)
}

/// Gradients of one scan with respect to each operand.
pub(crate) struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: Vec<f64>,
}

pub(crate) fn scan_backward(op: &ScanOperands<'_>, trace: &ScanTrace, gy: &[f64]) -> ScanGrads {
    let (l, dch, ns) = (op.len, op.channels, op.state);
    let mut g = ScanGrads {
        x: vec![0.0; l * dch],
        delta: vec![0.0; l * dch],
        a: vec![0.0; dch * ns],
        b: vec![0.0; l * ns],
        c: vec![0.0; l * ns],
        skip: vec![0.0; dch],
    };
    // dL/dh_t flowing back from step t + 1, already multiplied by its decay.
    let mut carry = vec![0.0; dch * ns];
    for t in (0..l).rev() {
        let bt = &op.b[t * ns..(t + 1) * ns];
        let ct = &op.c[t * ns..(t + 1) * ns];
        for d in 0..dch {
            let gyv = gy[t * dch + d];
            let xv = op.x[t * dch + d];
            let dl = op.delta[t * dch + d];
            g.skip[d] += gyv * xv;
            let base = (t * dch + d) * ns;
            let h_t = &trace.states[base..base + ns];
            let dec = &trace.decays[base..base + ns];
            let ad = &op.a[d * ns..(d + 1) * ns];
            let cd = &mut carry[d * ns..(d + 1) * ns];
            let mut gdelta = 0.0;
            let mut gx = gyv * op.skip[d];
            for n in 0..ns {
                let gh = cd[n] + gyv * ct[n];
                g.c[t * ns + n] += gyv * h_t[n];
                let hprev = if t > 0 { trace.states[base - dch * ns + n] } else { 0.0 };
                let gdecay = gh * hprev * dec[n];
                gdelta += gdecay * ad[n] + gh * bt[n] * xv;
                g.a[d * ns + n] += gdecay * dl;
                g.b[t * ns + n] += gh * dl * xv;
                gx += gh * dl * bt[n];
                cd[n] = gh * dec[n];
            }
            g.delta[t * dch + d] += gdelta;
            g.x[t * dch + d] += gx;
        }
    }
    g
}

/// Per-step projections of a sequence: `(delta, B, C)` in time-major layout.
fn project(x_tm: &[f64], len: usize, p: &ScanParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dch = p.channels();
    let ns = p.state_dim();
    let wd = p.w_delta.data();
    let bd = p.b_delta.data();
    let wb = p.w_b.data();
    let wc = p.w_c.data();
    let mut delta = vec![0.0; len * dch];
    let mut b = vec![0.0; len * ns];
    let mut c = vec![0.0; len * ns];
    for t in 0..len {
        let xt = &x_tm[t * dch..(t + 1) * dch];
        for o in 0..dch {
            let pre: f64 = bd[o] + wd[o * dch..(o + 1) * dch].iter().zip(xt).map(|(w, x)| w * x).sum::<f64>();
            delta[t * dch + o] = softplus(pre);
        }
        for n in 0..ns {
            b[t * ns + n] = wb[n * dch..(n + 1) * dch].iter().zip(xt).map(|(w, x)| w * x).sum();
            c[t * ns + n] = wc[n * dch..(n + 1) * dch].iter().zip(xt).map(|(w, x)| w * x).sum();
        }
    }
    (delta, b, c)
}

/// Runs the selective scan over a `D x L` sequence.
pub fn s6_scan(x: &Sequence, p: &ScanParams) -> Result<Sequence> {
    p.check()?;
    if x.len == 0 {
        return Err(Error::invalid("s6_scan", "empty sequence"));
    }
    if x.channels != p.channels() {
        return Err(Error::shape("s6_scan", &[x.channels, x.len], &[p.channels(), p.state_dim()]));
    }
    let xt = x.to_time_major();
    let (delta, b, c) = project(&xt, x.len, p);
    let a = p.a_matrix();
    let ops = ScanOperands {
        len: x.len,
        channels: x.channels,
        state: p.state_dim(),
        x: &xt,
        delta: &delta,
        a: &a,
        b: &b,
        c: &c,
        skip: p.d_skip.data(),
    };
    let (y, _) = scan_forward(&ops, false);
    Ok(Sequence::from_time_major(x.channels, x.len, &y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// Column-major: top to bottom, then left to right.
    VerticalForward,
    /// Row-major: left to right, then top to bottom.
    HorizontalForward,
    VerticalBackward,
    HorizontalBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::VerticalForward,
        ScanDirection::HorizontalForward,
        ScanDirection::VerticalBackward,
        ScanDirection::HorizontalBackward,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScanDirection::VerticalForward => "V-FWD",
            ScanDirection::HorizontalForward => "H-FWD",
            ScanDirection::VerticalBackward => "V-BWD",
            ScanDirection::HorizontalBackward => "H-BWD",
        }
    }

    /// `order[t]` is the flat `row * w + col` position visited at step `t`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row_major = || (0..h * w).collect::<Vec<_>>();
        let col_major = || {
            (0..w)
                .flat_map(|col| (0..h).map(move |row| row * w + col))
                .collect::<Vec<_>>()
        };
        match self {
            ScanDirection::HorizontalForward => row_major(),
            ScanDirection::VerticalForward => col_major(),
            ScanDirection::HorizontalBackward => {
                let mut o = row_major();
                o.reverse();
                o
            }
            ScanDirection::VerticalBackward => {
                let mut o = col_major();
                o.reverse();
                o
            }
        }
    }
}

/// A feature map unfolded into a 1-D sequence along one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalSequence {
    pub direction: ScanDirection,
    pub height: usize,
    pub width: usize,
    pub order: Vec<usize>,
    pub values: Sequence,
}

/// Unfolds a `1 x D x H x W` map into its four directional sequences.
pub fn ss2d_expand(x: &Tensor) -> Result<[DirectionalSequence; 4]> {
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::invalid("ss2d_expand", format!("expects batch 1, got {}", s.n)));
    }
    Ok(ScanDirection::ALL.map(|direction| {
        let order = direction.order(s.h, s.w);
        let values = Sequence::from_fn(s.c, order.len(), |d, t| x.plane(0, d)[order[t]]);
        DirectionalSequence {
            direction,
            height: s.h,
            width: s.w,
            order,
            values,
        }
    }))
}

/// Scatters each sequence back through its own order and sums the maps.
pub fn ss2d_merge(outs: &[DirectionalSequence]) -> Result<Tensor> {
    let first = outs
        .first()
        .ok_or_else(|| Error::invalid("ss2d_merge", "no sequences"))?;
    let (h, w, c) = (first.height, first.width, first.values.channels);
    let mut out = Tensor::zeros(Shape::new(1, c, h, w));
    for seq in outs {
        if (seq.height, seq.width, seq.values.channels) != (h, w, c)
            || seq.order.len() != h * w
            || seq.values.len != h * w
        {
            return Err(Error::shape(
                "ss2d_merge",
                &[c, h, w],
                &[seq.values.channels, seq.height, seq.width],
            ));
        }
        for d in 0..c {
            let plane = out.plane_mut(0, d);
            for (t, &pos) in seq.order.iter().enumerate() {
                plane[pos] += seq.values.at(d, t);
            }
        }
    }
    Ok(out)
}

/// Four-direction selective scan of a `1 x D x H x W` map: expand, scan each
/// direction with its own parameters, merge by summation.
pub fn ss2d(x: &Tensor, params: &[ScanParams; 4]) -> Result<Tensor> {
    let mut seqs = ss2d_expand(x)?;
    for (seq, p) in seqs.iter_mut().zip(params) {
        seq.values = s6_scan(&seq.values, p)?;
    }
    ss2d_merge(&seqs)
}

/// Operation count of one scan over `len` steps: seven per state element
/// (discretization, state update, readout) and two per channel (skip term).
pub fn scan_flops(len: usize, channels: usize, state: usize) -> u64 {
    (len * channels * (7 * state + 2)) as u64
}

/// Forward record of [`directional_scan`] for one batch.
pub(crate) struct DirectionalCache {
    pub direction: ScanDirection,
    pub shape: Shape,
    pub state: usize,
    samples: Vec<SampleCache>,
}

struct SampleCache {
    x: Vec<f64>,
    delta: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    trace: ScanTrace,
}

fn gather(t: &Tensor, n: usize, order: &[usize]) -> Vec<f64> {
    let s = t.shape();
    let mut out = vec![0.0; order.len() * s.c];
    for ch in 0..s.c {
        let plane = t.plane(n, ch);
        for (step, &pos) in order.iter().enumerate() {
            out[step * s.c + ch] = plane[pos];
        }
    }
    out
}

fn scatter(dst: &mut Tensor, n: usize, order: &[usize], tm: &[f64]) {
    let c = dst.shape().c;
    for ch in 0..c {
        let plane = dst.plane_mut(n, ch);
        for (step, &pos) in order.iter().enumerate() {
            plane[pos] += tm[step * c + ch];
        }
    }
}

/// Selective scan along one direction of already-projected 2-D operands:
/// `x`, `delta`: `N x D x H x W`; `b`, `c`: `N x S x H x W`; `a`: `D x S`
/// (negative); `skip`: `D`. The output is scattered back to `N x D x H x W`.
pub(crate) fn directional_scan(
    direction: ScanDirection,
    x: &Tensor,
    delta: &Tensor,
    a: &[f64],
    b: &Tensor,
    c: &Tensor,
    skip: &[f64],
    keep_trace: bool,
) -> Result<(Tensor, Option<DirectionalCache>)> {
    let s = x.shape();
    let ns = b.shape().c;
    if delta.shape() != s
        || b.shape() != c.shape()
        || (b.shape().n, b.shape().h, b.shape().w) != (s.n, s.h, s.w)
        || a.len() != s.c * ns
        || skip.len() != s.c
    {
        return Err(Error::shape("directional_scan", &s.dims(), &b.shape().dims()));
    }
    let order = direction.order(s.h, s.w);
    let mut out = Tensor::zeros(s);
    let mut samples = Vec::new();
    for n in 0..s.n {
        let xs = gather(x, n, &order);
        let ds = gather(delta, n, &order);
        let bs = gather(b, n, &order);
        let cs = gather(c, n, &order);
        let op = ScanOperands {
            len: order.len(),
            channels: s.c,
            state: ns,
            x: &xs,
            delta: &ds,
            a,
            b: &bs,
            c: &cs,
            skip,
        };
        let (y, trace) = scan_forward(&op, keep_trace);
        scatter(&mut out, n, &order, &y);
        if let Some(trace) = trace {
            samples.push(SampleCache {
                x: xs,
                delta: ds,
                b: bs,
                c: cs,
                trace,
            });
        }
    }
    let cache = keep_trace.then(|| DirectionalCache {
        direction,
        shape: s,
        state: ns,
        samples,
    });
    Ok((out, cache))
}

/// Gradients `(x, delta, a, b, c, skip)` of [`directional_scan`].
pub(crate) fn directional_scan_backward(
    cache: &DirectionalCache,
    a: &[f64],
    skip: &[f64],
    gout: &Tensor,
) -> (Tensor, Tensor, Vec<f64>, Tensor, Tensor, Vec<f64>) {
    let s = cache.shape;
    let ns = cache.state;
    let order = cache.direction.order(s.h, s.w);
    let bshape = Shape::new(s.n, ns, s.h, s.w);
    let mut gx = Tensor::zeros(s);
    let mut gdelta = Tensor::zeros(s);
    let mut gb = Tensor::zeros(bshape);
    let mut gc = Tensor::zeros(bshape);
    let mut ga = vec![0.0; a.len()];
    let mut gskip = vec![0.0; skip.len()];
    for (n, sc) in cache.samples.iter().enumerate() {
        let gy = gather(gout, n, &order);
        let op = ScanOperands {
            len: order.len(),
            channels: s.c,
            state: ns,
            x: &sc.x,
            delta: &sc.delta,
            a,
            b: &sc.b,
            c: &sc.c,
            skip,
        };
        let g = scan_backward(&op, &sc.trace, &gy);
        scatter(&mut gx, n, &order, &g.x);
        scatter(&mut gdelta, n, &order, &g.delta);
        scatter(&mut gb, n, &order, &g.b);
        scatter(&mut gc, n, &order, &g.c);
        for (acc, v) in ga.iter_mut().zip(&g.a) {
            *acc += v;
        }
        for (acc, v) in gskip.iter_mut().zip(&g.skip) {
            *acc += v;
        }
    }
    (gx, gdelta, ga, gb, gc, gskip)
}

/// SS2D through 2-D projections followed by [`directional_scan`]. Equivalent
/// to [`ss2d`] but accepts any batch size; used as a cross-check of the
/// autodiff path.
pub fn ss2d_projected(x: &Tensor, params: &[ScanParams; 4]) -> Result<Tensor> {
    let mut out = Tensor::zeros(x.shape());
    for (dir, p) in ScanDirection::ALL.into_iter().zip(params) {
        p.check()?;
        let delta = ops::activate(&ops::linear(x, &p.w_delta, p.b_delta.data())?, Activation::Softplus);
        let zeros = vec![0.0; p.state_dim()];
        let b = ops::linear(x, &p.w_b, &zeros)?;
        let c = ops::linear(x, &p.w_c, &zeros)?;
        let (y, _) = directional_scan(dir, x, &delta, &p.a_matrix(), &b, &c, p.d_skip.data(), false)?;
        out.add_assign(&y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Explicit recurrence with materialized state vectors, one channel at a
    /// time, recomputing every projection from scratch.
    fn brute_force(x: &Sequence, p: &ScanParams) -> Sequence {
        let dch = p.channels();
        let ns = p.state_dim();
        let mut y = Sequence::zeros(dch, x.len);
        for d in 0..dch {
            let mut h = vec![0.0f64; ns];
            for t in 0..x.len {
                let xt: Vec<f64> = (0..dch).map(|k| x.at(k, t)).collect();
                let mut pre = p.b_delta.data()[d];
                for k in 0..dch {
                    pre += p.w_delta.at(d, k, 0, 0) * xt[k];
                }
                let delta = (1.0 + pre.exp()).ln();
                let bvec: Vec<f64> = (0..ns)
                    .map(|n| (0..dch).map(|k| p.w_b.at(n, k, 0, 0) * xt[k]).sum())
                    .collect();
                let cvec: Vec<f64> = (0..ns)
                    .map(|n| (0..dch).map(|k| p.w_c.at(n, k, 0, 0) * xt[k]).sum())
                    .collect();
                let mut yt = 0.0;
                for n in 0..ns {
                    let a = -p.a_log.at(d, n, 0, 0).exp();
                    h[n] = (delta * a).exp() * h[n] + delta * bvec[n] * xt[d];
                    yt += cvec[n] * h[n];
                }
                y.data[d * x.len + t] = yt + p.d_skip.data()[d] * xt[d];
            }
        }
        y
    }

    fn random_params(dch: usize, ns: usize, rng: &mut ChaCha8Rng) -> ScanParams {
        let mut p = ScanParams::init(dch, ns, rng);
        p.a_log = Tensor::uniform(p.a_log.shape(), -1.0, 1.5, rng);
        p.b_delta = Tensor::uniform(p.b_delta.shape(), -2.0, 0.5, rng);
        p.d_skip = Tensor::uniform(p.d_skip.shape(), -1.0, 1.0, rng);
        p
    }

    #[test]
    fn discretize_closed_forms() {
        let (a_bar, b_scale) = discretize(-1.0, 2f64.ln());
        assert!((a_bar - 0.5).abs() < 1e-15);
        assert_eq!(b_scale, 2f64.ln());
        let (a_bar, _) = discretize(-2.5, 0.3);
        assert_eq!(a_bar, (-0.75f64).exp());
        let (a_bar, b_scale) = discretize(-3.0, 1e-300);
        assert_eq!(a_bar, 1.0);
        assert_eq!(b_scale, 1e-300);
    }

    #[test]
    fn initial_step_size_is_point_one() {
        assert!((softplus(initial_delta_bias()) - INITIAL_DELTA).abs() < 1e-14);
    }

    #[test]
    fn single_step_collapses_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(3, 4, &mut rng);
        let x = Sequence::from_fn(3, 1, |d, _| d as f64 - 0.7);
        let y = s6_scan(&x, &p).unwrap();
        for d in 0..3 {
            let xt: Vec<f64> = (0..3).map(|k| x.at(k, 0)).collect();
            let pre: f64 = p.b_delta.data()[d] + (0..3).map(|k| p.w_delta.at(d, k, 0, 0) * xt[k]).sum::<f64>();
            let delta = softplus(pre);
            let mut expect = p.d_skip.data()[d] * xt[d];
            for n in 0..4 {
                let b: f64 = (0..3).map(|k| p.w_b.at(n, k, 0, 0) * xt[k]).sum();
                let c: f64 = (0..3).map(|k| p.w_c.at(n, k, 0, 0) * xt[k]).sum();
                expect += c * delta * b * xt[d];
            }
            assert!((y.at(d, 0) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn vanishing_step_is_memoryless_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = random_params(4, 8, &mut rng);
        p.w_delta = Tensor::zeros(p.w_delta.shape());
        p.b_delta = Tensor::full(p.b_delta.shape(), -60.0);
        let x = Sequence::from_fn(4, 20, |d, t| ((d * 7 + t * 3) % 11) as f64 / 5.0 - 1.0);
        let y = s6_scan(&x, &p).unwrap();
        for d in 0..4 {
            for t in 0..20 {
                let pass = p.d_skip.data()[d] * x.at(d, t);
                assert!((y.at(d, t) - pass).abs() < 1e-20 + 1e-12 * pass.abs());
            }
        }
    }

    #[test]
    fn random_instance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = random_params(4, 8, &mut rng);
        let x = Sequence::from_fn(4, 32, |_, _| rng.random_range(-1.0..1.0));
        let y = s6_scan(&x, &p).unwrap();
        let o = brute_force(&x, &p);
        for (a, b) in y.data.iter().zip(&o.data) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300) + 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ScanParams::init(2, 4, &mut rng);
        assert!(s6_scan(&Sequence::zeros(2, 0), &p).is_err());
        assert!(s6_scan(&Sequence::zeros(3, 2), &p).is_err());
    }

    #[test]
    fn stability_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(2, 4, &mut rng);
        let x = Sequence::from_fn(2, 64, |_, _| rng.random_range(-1.0..1.0));
        let xt = x.to_time_major();
        let (delta, b, c) = project(&xt, 64, &p);
        let a = p.a_matrix();
        let op = ScanOperands {
            len: 64,
            channels: 2,
            state: 4,
            x: &xt,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            skip: p.d_skip.data(),
        };
        let (_, trace) = scan_forward(&op, true);
        let trace = trace.unwrap();
        let mut max_in = 0.0f64;
        let mut max_decay = 0.0f64;
        for t in 0..64 {
            for d in 0..2 {
                for n in 0..4 {
                    max_in = max_in.max((delta[t * 2 + d] * b[t * 4 + n] * xt[t * 2 + d]).abs());
                    max_decay = max_decay.max(trace.decays[(t * 2 + d) * 4 + n]);
                }
            }
        }
        assert!(max_decay < 1.0);
        let bound = max_in / (1.0 - max_decay);
        assert!(trace.states.iter().all(|h| h.abs() <= bound * (1.0 + 1e-12)));
    }

    #[test]
    fn traversal_orders_on_two_by_two() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let seqs = ss2d_expand(&x).unwrap();
        let vals = |i: usize| seqs[i].values.data.clone();
        assert_eq!(seqs[0].direction, ScanDirection::VerticalForward);
        assert_eq!(vals(0), vec![0.0, 2.0, 1.0, 3.0]);
        assert_eq!(vals(1), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(vals(2), vec![3.0, 1.0, 2.0, 0.0]);
        assert_eq!(vals(3), vec![3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn single_pixel_sequences_are_identical() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![4.0, -1.0]).unwrap();
        let seqs = ss2d_expand(&x).unwrap();
        for s in &seqs {
            assert_eq!(s.values.len, 1);
            assert_eq!(s.values.data, seqs[0].values.data);
        }
    }

    #[test]
    fn orders_are_bijections_and_backward_reverses_forward() {
        for (h, w) in [(3, 2), (1, 5), (4, 4), (2, 7)] {
            for dir in ScanDirection::ALL {
                let mut o = dir.order(h, w);
                o.sort_unstable();
                assert_eq!(o, (0..h * w).collect::<Vec<_>>());
            }
            let mut hb = ScanDirection::HorizontalBackward.order(h, w);
            hb.reverse();
            assert_eq!(hb, ScanDirection::HorizontalForward.order(h, w));
            let mut vb = ScanDirection::VerticalBackward.order(h, w);
            vb.reverse();
            assert_eq!(vb, ScanDirection::VerticalForward.order(h, w));
        }
    }

    #[test]
    fn merge_sums_aligned_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::uniform(Shape::new(1, 2, 3, 2), -1.0, 1.0, &mut rng);
        let seqs = ss2d_expand(&t).unwrap();
        let merged = ss2d_merge(&seqs).unwrap();
        let mut four = t.clone();
        four.scale(4.0);
        assert!(merged.max_abs_diff(&four) < 1e-15);

        let mut one = ss2d_expand(&t).unwrap();
        for s in one.iter_mut().skip(1) {
            s.values.data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(ss2d_merge(&one).unwrap(), t);
    }

    #[test]
    fn merge_matches_per_position_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::uniform(Shape::new(1, 3, 3, 4), -1.0, 1.0, &mut rng);
        let mut seqs = ss2d_expand(&t).unwrap();
        for s in seqs.iter_mut() {
            s.values.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let merged = ss2d_merge(&seqs).unwrap();
        for d in 0..3 {
            for row in 0..3 {
                for col in 0..4 {
                    let pos = row * 4 + col;
                    let expect: f64 = seqs
                        .iter()
                        .map(|s| {
                            let t = s.order.iter().position(|&p| p == pos).unwrap();
                            s.values.at(d, t)
                        })
                        .sum();
                    assert!((merged.at(0, d, row, col) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn merge_rejects_mismatched_grids() {
        let a = ss2d_expand(&Tensor::zeros(Shape::new(1, 1, 2, 3))).unwrap();
        let b = ss2d_expand(&Tensor::zeros(Shape::new(1, 1, 3, 2))).unwrap();
        assert!(ss2d_merge(&[a[0].clone(), b[1].clone()]).is_err());
    }

    #[test]
    fn ss2d_preserves_shape_and_matches_projected_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (h, w) in [(1, 1), (3, 2), (4, 5)] {
            let x = Tensor::uniform(Shape::new(1, 3, h, w), -1.0, 1.0, &mut rng);
            let params = [0, 1, 2, 3].map(|_| random_params(3, 4, &mut rng));
            let y = ss2d(&x, &params).unwrap();
            assert_eq!(y.shape(), x.shape());
            let z = ss2d_projected(&x, &params).unwrap();
            assert!(y.max_abs_diff(&z) < 1e-12);
        }
    }

    #[test]
    fn single_pixel_ss2d_sums_four_single_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::uniform(Shape::new(1, 3, 1, 1), -1.0, 1.0, &mut rng);
        let params = [0, 1, 2, 3].map(|_| random_params(3, 4, &mut rng));
        let y = ss2d(&x, &params).unwrap();
        let seq = Sequence::from_fn(3, 1, |d, _| x.data()[d]);
        let mut expect = vec![0.0; 3];
        for p in &params {
            let s = s6_scan(&seq, p).unwrap();
            for d in 0..3 {
                expect[d] += s.at(d, 0);
            }
        }
        for d in 0..3 {
            assert!((y.data()[d] - expect[d]).abs() < 1e-15);
        }
    }
}
