//! Bilinear upsampling with half-pixel centers (align-corners off).

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Source taps `(i0, i1, frac)` for each output index along one axis.
fn axis_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample_bilinear", "factor must be positive"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    let rows = axis_taps(s.h, factor);
    let cols = axis_taps(s.w, factor);
    let os = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - fx) + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * (1.0 - fx) + src[y1 * s.w + x1] * fx;
                    dst[oy * os.w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample_bilinear_backward(input: Shape, factor: usize, gout: &Tensor) -> Tensor {
    if factor == 1 {
        return gout.clone();
    }
    let rows = axis_taps(input.h, factor);
    let cols = axis_taps(input.w, factor);
    let ow = input.w * factor;
    let mut gx = Tensor::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            let g = gout.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    dst[y0 * input.w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * input.w + x1] += v * (1.0 - fy) * fx;
                    dst[y1 * input.w + x0] += v * fy * (1.0 - fx);
                    dst[y1 * input.w + x1] += v * fy * fx;
                }
            }
        }
    }
    gx
}
