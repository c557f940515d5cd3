//! Reverse-mode differentiation over a recorded graph of tensor ops.
//!
//! A [`Graph`] owns the value of every intermediate. Forward methods compute
//! with the pure kernels in [`crate::ops`] and record enough to replay the op
//! backward. [`Graph::backward`] walks the record in reverse from a scalar.

use crate::error::{Error, Result};
use crate::ops::conv::conv2d_backward;
use crate::ops::elementwise::{broadcast_kind, rhs_plane_value, shuffle_source, Broadcast};
use crate::ops::norm::{group_norm_backward, group_norm_with_stats, layer_norm_backward, layer_norm_with_stats};
use crate::ops::pool::adaptive_avg_pool_backward;
use crate::ops::resample::upsample_bilinear_backward;
use crate::ops::{self, Activation, BinOp, ConvGeometry};
use crate::params::{ParamId, ParamStore, EMPTY_STORE};
use crate::ssm::{directional_scan, directional_scan_backward, DirectionalCache, ScanDirection};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Half-open spatial window `[rows.0, rows.1) x [cols.0, cols.1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Region {
    pub fn full(h: usize, w: usize) -> Self {
        Region {
            rows: (0, h),
            cols: (0, w),
        }
    }

    pub fn area(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }
}

enum Op {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Binary {
        x: Var,
        y: Var,
        op: BinOp,
        bcast: Broadcast,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalMax {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvg {
        x: Var,
        k: usize,
    },
    RegionMean {
        x: Var,
        regions: Vec<Region>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Shuffle {
        x: Var,
        groups: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    NegExp {
        x: Var,
    },
    Scan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        skip: Var,
        cache: Box<DirectionalCache>,
    },
    SoftIou {
        p: Var,
        target: Tensor,
        eps: f64,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    record: bool,
    flops: u64,
}

impl Graph<'static> {
    /// A graph with no parameter store; only leaves created through
    /// [`Graph::input`] / [`Graph::variable`] exist.
    pub fn standalone() -> Self {
        Graph::new(&EMPTY_STORE)
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: vec![None; store.len()],
            record: true,
            flops: 0,
        }
    }

    /// Forward-only graph: no per-op caches are kept and `backward` fails.
    pub fn inference(store: &'a ParamStore) -> Self {
        Graph {
            record: false,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations of the recorded convolutions and scans:
    /// `2 * MACs` per convolution plus [`crate::ssm::scan_flops`] per scan.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf whose gradient is reported by [`Gradients::of`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: self.store.get(id).clone(),
            op: Op::Param,
            requires_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.params[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = ops::conv2d_raw(self.value(x), self.value(w), bias.as_deref(), geom)?;
        let k = self.shape(w);
        self.flops += 2 * (out.numel() * k.c * k.h * k.w) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &inputs))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let out = ops::activate(self.value(x), kind);
        self.push(out, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn binary(&mut self, x: Var, y: Var, op: BinOp) -> Result<Var> {
        let bcast = broadcast_kind(self.shape(x), self.shape(y))?;
        let out = ops::binary(self.value(x), self.value(y), op)?;
        Ok(self.push(out, Op::Binary { x, y, op, bcast }, &[x, y]))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(x, y, BinOp::Add)
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(x, y, BinOp::Mul)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, inv_std) = layer_norm_with_stats(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Per-sample normalization over channel groups and positions; see
    /// [`ops::group_norm`].
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, inv_std) = group_norm_with_stats(
            self.value(x),
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::max_pool2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (out, argmax) = ops::global_max_pool(self.value(x));
        self.push(out, Op::GlobalMax { x, argmax }, &[x])
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = ops::adaptive_avg_pool(self.value(x), k)?;
        Ok(self.push(out, Op::AdaptiveAvg { x, k }, &[x]))
    }

    /// Per-sample spatial mean over `regions[n]`, giving `N x C x 1 x 1`.
    pub fn region_mean(&mut self, x: Var, regions: &[Region]) -> Result<Var> {
        let s = self.shape(x);
        if regions.len() != s.n {
            return Err(Error::invalid(
                "region_mean",
                format!("{} regions for batch of {}", regions.len(), s.n),
            ));
        }
        for r in regions {
            if r.rows.0 >= r.rows.1 || r.cols.0 >= r.cols.1 || r.rows.1 > s.h || r.cols.1 > s.w {
                return Err(Error::invalid("region_mean", format!("{r:?} outside {}x{}", s.h, s.w)));
            }
        }
        let src = self.value(x);
        let out = Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
            let r = regions[n];
            let plane = src.plane(n, c);
            let mut acc = 0.0;
            for h in r.rows.0..r.rows.1 {
                acc += plane[h * s.w + r.cols.0..h * s.w + r.cols.1].iter().sum::<f64>();
            }
            acc / r.area() as f64
        });
        let op = Op::RegionMean {
            x,
            regions: regions.to_vec(),
        };
        Ok(self.push(out, op, &[x]))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let out = ops::channel_shuffle(self.value(x), groups)?;
        Ok(self.push(out, Op::Shuffle { x, groups }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&vals)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    /// `-exp(x)`, the negative-definite state matrix parameterization.
    pub fn neg_exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v.exp());
        self.push(out, Op::NegExp { x }, &[x])
    }

    /// Selective scan along `direction`. `a` is `D x S x 1 x 1` (already
    /// negative), `skip` is `1 x D x 1 x 1`; see [`crate::ssm`].
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        direction: ScanDirection,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        skip: Var,
    ) -> Result<Var> {
        let (out, cache) = directional_scan(
            direction,
            self.value(x),
            self.value(delta),
            self.value(a).data(),
            self.value(b),
            self.value(c),
            self.value(skip).data(),
            self.record,
        )?;
        let s = self.shape(x);
        self.flops += s.n as u64 * crate::ssm::scan_flops(s.h * s.w, s.c, self.shape(b).c);
        let inputs = [x, delta, a, b, c, skip];
        match cache {
            Some(cache) => {
                let op = Op::Scan {
                    x,
                    delta,
                    a,
                    b,
                    c,
                    skip,
                    cache: Box::new(cache),
                };
                Ok(self.push(out, op, &inputs))
            }
            None => Ok(self.push(out, Op::Leaf, &inputs)),
        }
    }

    /// `1 - (sum(p*t) + eps) / (sum(p) + sum(t) - sum(p*t) + eps)`.
    pub fn soft_iou_loss(&mut self, p: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(Error::shape("soft_iou_loss", &pv.shape().dims(), &target.shape().dims()));
        }
        let (inter, union) = soft_iou_terms(pv, target);
        let loss = 1.0 - (inter + eps) / (union + eps);
        let op = Op::SoftIou {
            p,
            target: target.clone(),
            eps,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    /// `sum_i w_i * s_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::invalid("weighted_sum", "terms must be scalars"));
            }
            acc += w * t.data()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &inputs,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::invalid("backward", "graph was built in inference mode"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            // interior gradients are released as soon as they are consumed
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let mut by_param = vec![None; self.store.len()];
        for (pid, var) in self.params.iter().enumerate() {
            if let Some(v) = var {
                by_param[pid] = grads[v.0].clone();
            }
        }
        Ok(Gradients {
            nodes: grads,
            by_param,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), *geom, g, self.needs(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                acc(*w, gw);
                if let Some(b) = b {
                    let shape = self.shape(*b);
                    acc(*b, Tensor::from_vec(shape, gb).expect("bias shape"));
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &t) in gx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= kind.derivative(t);
                }
                acc(*x, gx);
            }
            Op::Binary { x, y, op, bcast } => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                match (op, bcast) {
                    (BinOp::Add, Broadcast::Same) => {
                        acc(*x, g.clone());
                        acc(*y, g.clone());
                    }
                    (BinOp::Mul, Broadcast::Same) => {
                        let mut gx = g.clone();
                        let mut gy = g.clone();
                        for ((a, b), (&xe, &ye)) in gx
                            .data_mut()
                            .iter_mut()
                            .zip(gy.data_mut().iter_mut())
                            .zip(xv.data().iter().zip(yv.data()))
                        {
                            *a *= ye;
                            *b *= xe;
                        }
                        acc(*x, gx);
                        acc(*y, gy);
                    }
                    (op, kind) => {
                        let s = xv.shape();
                        let mut gy = Tensor::zeros(yv.shape());
                        let mut gx = g.clone();
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let gp = g.plane(n, c);
                                let yi = if *kind == Broadcast::Channel { c } else { n * s.c + c };
                                let contrib = match op {
                                    BinOp::Add => gp.iter().sum::<f64>(),
                                    BinOp::Mul => {
                                        let k = rhs_plane_value(*kind, yv, n, c);
                                        gx.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
                                        gp.iter().zip(xv.plane(n, c)).map(|(a, b)| a * b).sum()
                                    }
                                };
                                gy.data_mut()[yi] += contrib;
                            }
                        }
                        acc(*x, gx);
                        acc(*y, gy);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (gx, gg, gb) = layer_norm_backward(xhat, inv_std, self.value(*gamma).data(), g);
                acc(*x, gx);
                acc(*gamma, Tensor::channel_vector(&gg));
                acc(*beta, Tensor::channel_vector(&gb));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (gx, gg, gb) = group_norm_backward(xhat, inv_std, *groups, self.value(*gamma).data(), g);
                acc(*x, gx);
                acc(*gamma, Tensor::channel_vector(&gg));
                acc(*beta, Tensor::channel_vector(&gb));
            }
            Op::MaxPool2 { x, argmax } | Op::GlobalMax { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                acc(*x, gx);
            }
            Op::AdaptiveAvg { x, k } => {
                acc(*x, adaptive_avg_pool_backward(self.shape(*x), *k, g));
            }
            Op::RegionMean { x, regions } => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s);
                for (n, r) in regions.iter().enumerate() {
                    let inv = 1.0 / r.area() as f64;
                    for c in 0..s.c {
                        let gv = g.at(n, c, 0, 0) * inv;
                        let plane = gx.plane_mut(n, c);
                        for h in r.rows.0..r.rows.1 {
                            plane[h * s.w + r.cols.0..h * s.w + r.cols.1].iter_mut().for_each(|v| *v = gv);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample { x, factor } => {
                acc(*x, upsample_bilinear_backward(self.shape(*x), *factor, g));
            }
            Op::Shuffle { x, groups } => {
                let s = g.shape();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        gx.plane_mut(n, shuffle_source(c, s.c, *groups)).copy_from_slice(g.plane(n, c));
                    }
                }
                acc(*x, gx);
            }
            Op::Concat { parts } => {
                let mut c0 = 0;
                for &p in parts {
                    let len = self.shape(p).c;
                    acc(p, ops::slice_channels(g, c0, len).expect("concat slice"));
                    c0 += len;
                }
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..g.shape().c {
                        gx.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                    }
                }
                acc(*x, gx);
            }
            Op::NegExp { x } => {
                let mut gx = g.clone();
                for (o, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= y;
                }
                acc(*x, gx);
            }
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                skip,
                cache,
            } => {
                let (gx, gd, ga, gb, gc, gs) =
                    directional_scan_backward(cache, self.value(*a).data(), self.value(*skip).data(), g);
                acc(*x, gx);
                acc(*delta, gd);
                acc(*a, Tensor::from_vec(self.shape(*a), ga).expect("a shape"));
                acc(*b, gb);
                acc(*c, gc);
                acc(*skip, Tensor::from_vec(self.shape(*skip), gs).expect("skip shape"));
            }
            Op::SoftIou { p, target, eps } => {
                let pv = self.value(*p);
                let (inter, union) = soft_iou_terms(pv, target);
                let num = inter + eps;
                let den = union + eps;
                let gl = g.data()[0];
                let mut gp = Tensor::zeros(pv.shape());
                for (o, &t) in gp.data_mut().iter_mut().zip(target.data()) {
                    // d(num/den)/dp = (t * den - num * (1 - t)) / den^2
                    *o = -gl * (t * den - num * (1.0 - t)) / (den * den);
                }
                acc(*p, gp);
            }
            Op::Sum { x } => {
                acc(*x, Tensor::full(self.shape(*x), g.data()[0]));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    acc(v, Tensor::scalar(w * g.data()[0]));
                }
            }
        }
    }
}

fn soft_iou_terms(p: &Tensor, target: &Tensor) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&a, &b) in p.data().iter().zip(target.data()) {
        inter += a * b;
        sp += a;
        st += b;
    }
    (inter, sp + st - inter)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf (variable or parameter); `None` for interior nodes
    /// and for leaves nothing flowed into.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param[id.index()].as_ref()
    }

    /// Gradients aligned with the store, zero-filled for unused parameters.
    pub fn into_param_grads(self, store: &ParamStore) -> Vec<Tensor> {
        self.by_param
            .into_iter()
            .zip(store.ids())
            .map(|(g, id)| g.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}
