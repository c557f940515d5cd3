//! Activations, broadcast arithmetic and channel bookkeeping.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
    Softplus,
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t
    } else {
        t.exp().ln_1p()
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Relu => t.max(0.0),
            Activation::Silu => t * sigmoid(t),
            Activation::Sigmoid => sigmoid(t),
            Activation::Softplus => softplus(t),
        }
    }

    /// Derivative at input `t`.
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(t);
                s * (1.0 + t * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(t),
        }
    }
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|t| kind.apply(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Mul,
}

/// How the right operand lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `1 x C x 1 x 1` over every sample and pixel.
    Channel,
    /// `N x C x 1 x 1` over pixels of the matching sample.
    SampleChannel,
}

pub(crate) fn broadcast_kind(lhs: Shape, rhs: Shape) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if rhs.c == lhs.c && rhs.h == 1 && rhs.w == 1 && rhs.n == 1 {
        Ok(Broadcast::Channel)
    } else if rhs.c == lhs.c && rhs.h == 1 && rhs.w == 1 && rhs.n == lhs.n {
        Ok(Broadcast::SampleChannel)
    } else {
        Err(Error::shape("broadcast", &lhs.dims(), &rhs.dims()))
    }
}

/// Index into the right operand for each (n, c) plane of the left.
#[inline]
pub(crate) fn rhs_plane_value(kind: Broadcast, rhs: &Tensor, n: usize, c: usize) -> f64 {
    match kind {
        Broadcast::Channel => rhs.data()[c],
        Broadcast::SampleChannel => rhs.data()[n * rhs.shape().c + c],
        Broadcast::Same => unreachable!(),
    }
}

/// `x (op) y`, where `y` is either the same shape or a per-channel vector.
pub fn binary(x: &Tensor, y: &Tensor, op: BinOp) -> Result<Tensor> {
    let kind = broadcast_kind(x.shape(), y.shape())?;
    let f = |a: f64, b: f64| match op {
        BinOp::Add => a + b,
        BinOp::Mul => a * b,
    };
    let mut out = x.clone();
    match kind {
        Broadcast::Same => {
            for (o, &b) in out.data_mut().iter_mut().zip(y.data()) {
                *o = f(*o, b);
            }
        }
        _ => {
            let s = x.shape();
            for n in 0..s.n {
                for c in 0..s.c {
                    let b = rhs_plane_value(kind, y, n, c);
                    for o in out.plane_mut(n, c) {
                        *o = f(*o, b);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Source channel for output channel `i`.
#[inline]
pub fn shuffle_source(i: usize, channels: usize, groups: usize) -> usize {
    (i % groups) * (channels / groups) + i / groups
}

fn check_shuffle(c: usize, groups: usize) -> Result<()> {
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "channel_shuffle",
            format!("{c} channels not divisible by {groups} groups"),
        ));
    }
    Ok(())
}

pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let s = x.shape();
    check_shuffle(s.c, groups)?;
    Ok(permute_channels(x, |i| shuffle_source(i, s.c, groups)))
}

/// Inverse of [`channel_shuffle`] with the same group count.
pub fn channel_unshuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let s = x.shape();
    check_shuffle(s.c, groups)?;
    let mut inverse = vec![0; s.c];
    for i in 0..s.c {
        inverse[shuffle_source(i, s.c, groups)] = i;
    }
    Ok(permute_channels(x, |i| inverse[i]))
}

fn permute_channels(x: &Tensor, source: impl Fn(usize) -> usize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            out.plane_mut(n, c).copy_from_slice(x.plane(n, source(c)));
        }
    }
    out
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?
        .shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat", &first.dims(), &s.dims()));
        }
        c_total += s.c;
    }
    let mut out = Tensor::zeros(Shape::new(first.n, c_total, first.h, first.w));
    for n in 0..first.n {
        let mut c0 = 0;
        for p in parts {
            for c in 0..p.shape().c {
                out.plane_mut(n, c0 + c).copy_from_slice(p.plane(n, c));
            }
            c0 += p.shape().c;
        }
    }
    Ok(out)
}

/// Channels `[start, start + len)`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::invalid(
            "slice_channels",
            format!("[{start}, {}) out of {} channels", start + len, s.c),
        ));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, len, s.h, s.w));
    for n in 0..s.n {
        for c in 0..len {
            out.plane_mut(n, c).copy_from_slice(x.plane(n, start + c));
        }
    }
    Ok(out)
}

/// Splits an even channel count into its lower and upper halves.
pub fn split_channels(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = x.shape().c;
    if c % 2 != 0 {
        return Err(Error::invalid("split_channels", format!("odd channel count {c}")));
    }
    Ok((slice_channels(x, 0, c / 2)?, slice_channels(x, c / 2, c / 2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labeled(c: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, c, 2, 2), |_, c, h, w| (c * 10 + h * 2 + w) as f64)
    }

    #[test]
    fn activations_at_known_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert!((Activation::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn channel_broadcast_mul_scales_channels() {
        let x = Tensor::full(Shape::new(1, 2, 2, 2), 1.5);
        let y = binary(&x, &Tensor::channel_vector(&[2.0, 3.0]), BinOp::Mul).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 3.0));
        assert!(y.plane(0, 1).iter().all(|&v| v == 4.5));
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let x = Tensor::zeros(Shape::new(1, 2, 2, 2));
        assert!(binary(&x, &Tensor::channel_vector(&[1.0, 2.0, 3.0]), BinOp::Add).is_err());
        assert!(binary(&x, &Tensor::zeros(Shape::new(1, 2, 2, 1)), BinOp::Add).is_err());
    }

    #[test]
    fn shuffle_interleaves_two_groups() {
        let x = labeled(4);
        let y = channel_shuffle(&x, 2).unwrap();
        let order: Vec<usize> = (0..4).map(|c| (y.plane(0, c)[0] / 10.0) as usize).collect();
        assert_eq!(order, vec![0, 2, 1, 3]);
    }

    #[test]
    fn shuffle_with_one_group_is_identity() {
        let x = labeled(5);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn shuffle_six_by_three_is_invertible_permutation() {
        let x = labeled(6);
        let y = channel_shuffle(&x, 3).unwrap();
        let mut seen: Vec<usize> = (0..6).map(|c| (y.plane(0, c)[0] / 10.0) as usize).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert_eq!(channel_unshuffle(&y, 3).unwrap(), x);
    }

    #[test]
    fn shuffle_rejects_indivisible() {
        assert!(channel_shuffle(&labeled(5), 2).is_err());
    }

    #[test]
    fn split_then_concat_restores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(Shape::new(2, 8, 3, 3), -1.0, 1.0, &mut rng);
        let (l, r) = split_channels(&x).unwrap();
        assert_eq!(l.shape().c, 4);
        assert_eq!(concat_channels(&[&l, &r]).unwrap(), x);
        assert!(split_channels(&labeled(3)).is_err());
    }
}
