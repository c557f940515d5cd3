use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// 2x2 window, stride 2.
    Max2,
    /// `k x k` output grid, each cell the mean of its input partition.
    AdaptiveAvg(usize),
}

pub fn pool(x: &Tensor, kind: PoolKind) -> Result<Tensor> {
    match kind {
        PoolKind::Max2 => max_pool2(x).map(|(y, _)| y),
        PoolKind::AdaptiveAvg(k) => adaptive_avg_pool(x, k),
    }
}

/// Max over 2x2 windows; also returns the flat input index of each maximum
/// (first in row-major order on ties).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(
            "max_pool2",
            format!("spatial size {}x{} must be even", s.h, s.w),
        ));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::with_capacity(os.numel());
    let data = x.data();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = base + (2 * oy) * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.data_mut()[o] = data[best];
                    argmax.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Cell `i` of a `k`-way adaptive partition of `len` covers
/// `[floor(i*len/k), ceil((i+1)*len/k))`.
pub fn adaptive_bounds(len: usize, k: usize, i: usize) -> (usize, usize) {
    (i * len / k, ((i + 1) * len).div_ceil(k))
}

pub fn adaptive_avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    if k == 0 || k > s.h || k > s.w {
        return Err(Error::invalid(
            "adaptive_avg_pool",
            format!("grid {k} exceeds spatial size {}x{}", s.h, s.w),
        ));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, k, k));
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for gy in 0..k {
                let (y0, y1) = adaptive_bounds(s.h, k, gy);
                for gx in 0..k {
                    let (x0, x1) = adaptive_bounds(s.w, k, gx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * s.w + x0..y * s.w + x1].iter().sum::<f64>();
                    }
                    out.set(n, c, gy, gx, acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn adaptive_avg_pool_backward(input: Shape, k: usize, gout: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            for gy in 0..k {
                let (y0, y1) = adaptive_bounds(input.h, k, gy);
                for gxi in 0..k {
                    let (x0, x1) = adaptive_bounds(input.w, k, gxi);
                    let g = gout.at(n, c, gy, gxi) / ((y1 - y0) * (x1 - x0)) as f64;
                    let plane = gx.plane_mut(n, c);
                    for y in y0..y1 {
                        for v in &mut plane[y * input.w + x0..y * input.w + x1] {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Per-channel spatial maximum (`N x C x 1 x 1`) with argmax flat indices.
pub fn global_max_pool(x: &Tensor) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let mut argmax = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let plane = x.plane(n, c);
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.set(n, c, 0, 0, plane[best]);
            argmax.push(base + best);
        }
    }
    (out, argmax)
}
