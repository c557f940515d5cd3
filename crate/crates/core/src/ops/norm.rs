use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes across channels at every `(n, h, w)` position, then applies the
/// per-channel affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta).map(|(y, _, _)| y)
}

/// Also returns the normalized values and per-position inverse std.
pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::shape("layer_norm", &s.dims(), &[gamma.len(), beta.len()]));
    }
    let p = s.plane();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * p);
    let data = x.data();
    let cf = s.c as f64;
    for n in 0..s.n {
        let base = n * s.c * p;
        let mut mean = vec![0.0; p];
        for c in 0..s.c {
            for (m, &v) in mean.iter_mut().zip(&data[base + c * p..base + (c + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= cf);
        let mut var = vec![0.0; p];
        for c in 0..s.c {
            let row = &data[base + c * p..base + (c + 1) * p];
            for i in 0..p {
                let d = row[i] - mean[i];
                var[i] += d * d;
            }
        }
        let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v / cf + LAYER_NORM_EPS).sqrt()).collect();
        for c in 0..s.c {
            let row = &data[base + c * p..base + (c + 1) * p];
            let xh = &mut xhat.data_mut()[base + c * p..base + (c + 1) * p];
            for i in 0..p {
                xh[i] = (row[i] - mean[i]) * istd[i];
            }
            let xh = &xhat.data()[base + c * p..base + (c + 1) * p];
            let o = &mut out.data_mut()[base + c * p..base + (c + 1) * p];
            for i in 0..p {
                o[i] = xh[i] * gamma[c] + beta[c];
            }
        }
        inv_std.extend(istd);
    }
    Ok((out, xhat, inv_std))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    gout: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = xhat.shape();
    let p = s.plane();
    let cf = s.c as f64;
    let mut gx = Tensor::zeros(s);
    let mut ggamma = vec![0.0; s.c];
    let mut gbeta = vec![0.0; s.c];
    let xd = xhat.data();
    let gd = gout.data();
    for n in 0..s.n {
        let base = n * s.c * p;
        let mut mean_g = vec![0.0; p];
        let mut mean_gx = vec![0.0; p];
        for c in 0..s.c {
            let off = base + c * p;
            for i in 0..p {
                let g = gd[off + i];
                ggamma[c] += g * xd[off + i];
                gbeta[c] += g;
                let gh = g * gamma[c];
                mean_g[i] += gh;
                mean_gx[i] += gh * xd[off + i];
            }
        }
        for c in 0..s.c {
            let off = base + c * p;
            let out = &mut gx.data_mut()[off..off + p];
            for i in 0..p {
                let gh = gd[off + i] * gamma[c];
                out[i] = inv_std[n * p + i] * (gh - mean_g[i] / cf - xd[off + i] * mean_gx[i] / cf);
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Normalizes each sample over groups of `c / groups` consecutive channels
/// and all positions, then applies the per-channel affine `gamma`, `beta`.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    group_norm_with_stats(x, groups, gamma, beta).map(|(y, _, _)| y)
}

/// Also returns the normalized values and the inverse std of each
/// `(sample, group)`, sample-major.
pub(crate) fn group_norm_with_stats(
    x: &Tensor,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::shape("group_norm", &s.dims(), &[gamma.len(), beta.len()]));
    }
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::invalid("group_norm", format!("{groups} groups do not divide {} channels", s.c)));
    }
    let span = s.c / groups * s.plane();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * groups);
    let data = x.data();
    for (k, chunk) in data.chunks(span).enumerate() {
        let mean = chunk.iter().sum::<f64>() / span as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
        let istd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        inv_std.push(istd);
        let xh = &mut xhat.data_mut()[k * span..(k + 1) * span];
        for (h, &v) in xh.iter_mut().zip(chunk) {
            *h = (v - mean) * istd;
        }
    }
    let p = s.plane();
    for (i, (o, &h)) in out.data_mut().iter_mut().zip(xhat.data()).enumerate() {
        let c = (i / p) % s.c;
        *o = h * gamma[c] + beta[c];
    }
    Ok((out, xhat, inv_std))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    groups: usize,
    gamma: &[f64],
    gout: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = xhat.shape();
    let p = s.plane();
    let span = s.c / groups * p;
    let mut gx = Tensor::zeros(s);
    let mut ggamma = vec![0.0; s.c];
    let mut gbeta = vec![0.0; s.c];
    let xd = xhat.data();
    let gd = gout.data();
    for (i, (&g, &h)) in gd.iter().zip(xd).enumerate() {
        let c = (i / p) % s.c;
        ggamma[c] += g * h;
        gbeta[c] += g;
    }
    for k in 0..s.n * groups {
        let range = k * span..(k + 1) * span;
        let (mut mean_g, mut mean_gx) = (0.0, 0.0);
        for i in range.clone() {
            let gh = gd[i] * gamma[(i / p) % s.c];
            mean_g += gh;
            mean_gx += gh * xd[i];
        }
        mean_g /= span as f64;
        mean_gx /= span as f64;
        let out = gx.data_mut();
        for i in range {
            let gh = gd[i] * gamma[(i / p) % s.c];
            out[i] = inv_std[k] * (gh - mean_g - xd[i] * mean_gx);
        }
    }
    (gx, ggamma, gbeta)
}
