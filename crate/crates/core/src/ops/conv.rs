//! 2-D convolution with stride, padding, dilation and groups.
//!
//! Ungrouped convolutions are lowered to a matrix product over an unfolded
//! (im2col) input; grouped ones run a direct loop nest.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    /// Stride-1 geometry that preserves spatial size for an odd `kernel`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Output extent along one axis, if the kernel fits.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Kernel `(out_c, in_c / groups, kh, kw)`, per-output-channel bias and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Vec<f64>,
    pub geometry: ConvGeometry,
}

impl ConvWeights {
    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c * self.geometry.groups
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.len()
    }
}

pub fn conv2d(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    conv2d_raw(x, &w.kernel, Some(&w.bias), w.geometry)
}

/// Checks operand shapes and returns the output shape.
pub fn conv_output_shape(x: Shape, kernel: Shape, geom: ConvGeometry) -> Result<Shape> {
    let ConvGeometry {
        stride,
        dilation,
        groups,
        ..
    } = geom;
    if stride == 0 || dilation == 0 || groups == 0 {
        return Err(Error::invalid("conv2d", "stride, dilation and groups must be positive"));
    }
    if kernel.n % groups != 0 || x.c % groups != 0 || x.c / groups != kernel.c {
        return Err(Error::shape("conv2d", &x.dims(), &kernel.dims()));
    }
    let ho = geom.output_len(x.h, kernel.h);
    let wo = geom.output_len(x.w, kernel.w);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(Shape::new(x.n, kernel.n, ho, wo)),
        _ => Err(Error::shape("conv2d", &x.dims(), &kernel.dims())),
    }
}

/// Range of output indices `[lo, hi)` whose tap `k` lands inside `[0, input)`.
#[inline]
fn valid_range(input: usize, output: usize, k: usize, geom: &ConvGeometry) -> (usize, usize) {
    let offset = (k * geom.dilation) as isize - geom.padding as isize;
    let s = geom.stride as isize;
    // smallest o with o*s + offset >= 0
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest o with o*s + offset <= input - 1
    let last = input as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.clamp(0, output as isize) as usize;
    let hi = hi.clamp(0, output as isize) as usize;
    (lo, hi.max(lo))
}

struct Taps {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl Taps {
    fn new(x: Shape, out: Shape, kh: usize, kw: usize, geom: &ConvGeometry) -> Self {
        Taps {
            rows: (0..kh).map(|k| valid_range(x.h, out.h, k, geom)).collect(),
            cols: (0..kw).map(|k| valid_range(x.w, out.w, k, geom)).collect(),
        }
    }
}

#[inline]
fn input_pos(o: usize, k: usize, geom: &ConvGeometry) -> usize {
    o * geom.stride + k * geom.dilation - geom.padding
}

pub fn conv2d_raw(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = conv_output_shape(xs, ks, geom)?;
    if let Some(b) = bias {
        if b.len() != ks.n {
            return Err(Error::shape("conv2d bias", &[b.len()], &ks.dims()));
        }
    }
    if geom.groups == 1 {
        Ok(gemm_forward(x, kernel, bias, geom, os))
    } else {
        Ok(direct_forward(x, kernel, bias, geom, os))
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, where
/// `a_t` / `b_t` select the transposed storage of the respective operand.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the checked slice extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_pointwise(ks: Shape, geom: &ConvGeometry) -> bool {
    ks.h == 1 && ks.w == 1 && geom.stride == 1 && geom.padding == 0
}

/// Unfolds sample `n` into a `(c * kh * kw) x (ho * wo)` matrix.
fn im2col(x: &Tensor, n: usize, ks: Shape, os: Shape, geom: &ConvGeometry, taps: &Taps, col: &mut [f64]) {
    let xs = x.shape();
    let p = os.h * os.w;
    for ic in 0..xs.c {
        let xplane = x.plane(n, ic);
        for ky in 0..ks.h {
            let (oy0, oy1) = taps.rows[ky];
            for kx in 0..ks.w {
                let (ox0, ox1) = taps.cols[kx];
                let row = &mut col[((ic * ks.h + ky) * ks.w + kx) * p..][..p];
                if ox0 >= ox1 || oy0 >= oy1 {
                    row.fill(0.0);
                    continue;
                }
                // only the padding taps need zeros
                row[..oy0 * os.w].fill(0.0);
                row[oy1 * os.w..].fill(0.0);
                let ix0 = input_pos(ox0, kx, geom);
                for oy in oy0..oy1 {
                    let iy = input_pos(oy, ky, geom);
                    let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                    row[oy * os.w..oy * os.w + ox0].fill(0.0);
                    row[oy * os.w + ox1..(oy + 1) * os.w].fill(0.0);
                    let dst = &mut row[oy * os.w + ox0..oy * os.w + ox1];
                    if geom.stride == 1 {
                        dst.copy_from_slice(&xrow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = xrow[ix0 + j * geom.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the unfolded gradient into `gx`.
fn col2im(gcol: &[f64], gx: &mut Tensor, n: usize, ks: Shape, os: Shape, geom: &ConvGeometry, taps: &Taps) {
    let xs = gx.shape();
    let p = os.h * os.w;
    for ic in 0..xs.c {
        let gplane = gx.plane_mut(n, ic);
        for ky in 0..ks.h {
            let (oy0, oy1) = taps.rows[ky];
            for kx in 0..ks.w {
                let (ox0, ox1) = taps.cols[kx];
                if ox0 >= ox1 {
                    continue;
                }
                let row = &gcol[((ic * ks.h + ky) * ks.w + kx) * p..][..p];
                let ix0 = input_pos(ox0, kx, geom);
                for oy in oy0..oy1 {
                    let iy = input_pos(oy, ky, geom);
                    let src = &row[oy * os.w + ox0..oy * os.w + ox1];
                    let grow = &mut gplane[iy * xs.w..(iy + 1) * xs.w];
                    if geom.stride == 1 {
                        for (g, &v) in grow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(src) {
                            *g += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            grow[ix0 + j * geom.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn gemm_forward(x: &Tensor, kernel: &Tensor, bias: Option<&[f64]>, geom: ConvGeometry, os: Shape) -> Tensor {
    let xs = x.shape();
    let ks = kernel.shape();
    let kk = ks.c * ks.h * ks.w;
    let p = os.h * os.w;
    let pointwise = is_pointwise(ks, &geom);
    let taps = Taps::new(xs, os, ks.h, ks.w, &geom);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        let dst = &mut out.data_mut()[n * os.c * p..(n + 1) * os.c * p];
        if let Some(b) = bias {
            for (oc, plane) in dst.chunks_exact_mut(p).enumerate() {
                plane.fill(b[oc]);
            }
        }
        let src: &[f64] = if pointwise {
            &x.data()[n * xs.c * p..(n + 1) * xs.c * p]
        } else {
            im2col(x, n, ks, os, &geom, &taps, &mut col);
            &col
        };
        gemm(os.c, kk, p, kernel.data(), false, src, false, dst, 1.0);
    }
    out
}

fn gemm_backward(
    x: &Tensor,
    kernel: &Tensor,
    geom: ConvGeometry,
    gout: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = gout.shape();
    let kk = ks.c * ks.h * ks.w;
    let p = os.h * os.w;
    let pointwise = is_pointwise(ks, &geom);
    let taps = Taps::new(xs, os, ks.h, ks.w, &geom);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut gcol = if want_input { vec![0.0; kk * p] } else { Vec::new() };
    let mut gx = want_input.then(|| Tensor::zeros(xs));
    let mut gk = Tensor::zeros(ks);
    let mut gb = vec![0.0; ks.n];
    for n in 0..xs.n {
        let g = &gout.data()[n * os.c * p..(n + 1) * os.c * p];
        for (oc, plane) in g.chunks_exact(p).enumerate() {
            gb[oc] += plane.iter().sum::<f64>();
        }
        let src: &[f64] = if pointwise {
            &x.data()[n * xs.c * p..(n + 1) * xs.c * p]
        } else {
            im2col(x, n, ks, os, &geom, &taps, &mut col);
            &col
        };
        gemm(os.c, p, kk, g, false, src, true, gk.data_mut(), 1.0);
        if let Some(gx) = gx.as_mut() {
            if pointwise {
                let dst = &mut gx.data_mut()[n * xs.c * p..(n + 1) * xs.c * p];
                gemm(kk, os.c, p, kernel.data(), true, g, false, dst, 0.0);
            } else {
                gemm(kk, os.c, p, kernel.data(), true, g, false, &mut gcol, 0.0);
                col2im(&gcol, gx, n, ks, os, &geom, &taps);
            }
        }
    }
    (gx, gk, gb)
}

fn direct_forward(x: &Tensor, kernel: &Tensor, bias: Option<&[f64]>, geom: ConvGeometry, os: Shape) -> Tensor {
    let xs = x.shape();
    let ks = kernel.shape();
    let mut out = Tensor::zeros(os);
    let in_pg = ks.c;
    let out_pg = ks.n / geom.groups;
    let taps = Taps::new(xs, os, ks.h, ks.w, &geom);
    let kdata = kernel.data();
    let xdata = x.data();
    let (xh, xw) = (xs.h, xs.w);
    let wo = os.w;
    for n in 0..xs.n {
        for oc in 0..os.c {
            let g = oc / out_pg;
            let plane = out.plane_mut(n, oc);
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icl in 0..in_pg {
                let ic = g * in_pg + icl;
                let xoff = (n * xs.c + ic) * xh * xw;
                let xplane = &xdata[xoff..xoff + xh * xw];
                for ky in 0..ks.h {
                    let (oy0, oy1) = taps.rows[ky];
                    for kx in 0..ks.w {
                        let (ox0, ox1) = taps.cols[kx];
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = kdata[((oc * in_pg + icl) * ks.h + ky) * ks.w + kx];
                        for oy in oy0..oy1 {
                            let iy = input_pos(oy, ky, &geom);
                            let orow = &mut plane[oy * wo + ox0..oy * wo + ox1];
                            let ix0 = input_pos(ox0, kx, &geom);
                            let xrow = &xplane[iy * xw..(iy + 1) * xw];
                            if geom.stride == 1 {
                                for (o, &xv) in orow.iter_mut().zip(&xrow[ix0..ix0 + (ox1 - ox0)]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * xrow[ix0 + j * geom.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    geom: ConvGeometry,
    gout: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    if geom.groups == 1 {
        gemm_backward(x, kernel, geom, gout, want_input)
    } else {
        direct_backward(x, kernel, geom, gout, want_input)
    }
}

fn direct_backward(
    x: &Tensor,
    kernel: &Tensor,
    geom: ConvGeometry,
    gout: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Tensor, Vec<f64>) {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = gout.shape();
    let in_pg = ks.c;
    let out_pg = ks.n / geom.groups;
    let taps = Taps::new(xs, os, ks.h, ks.w, &geom);
    let mut gx = want_input.then(|| Tensor::zeros(xs));
    let mut gk = Tensor::zeros(ks);
    let mut gb = vec![0.0; ks.n];
    let kdata = kernel.data();
    let xdata = x.data();
    let (xh, xw) = (xs.h, xs.w);
    let wo = os.w;
    for n in 0..xs.n {
        for oc in 0..os.c {
            let g = oc / out_pg;
            let gplane = gout.plane(n, oc);
            gb[oc] += gplane.iter().sum::<f64>();
            for icl in 0..in_pg {
                let ic = g * in_pg + icl;
                let xoff = (n * xs.c + ic) * xh * xw;
                let xplane = &xdata[xoff..xoff + xh * xw];
                for ky in 0..ks.h {
                    let (oy0, oy1) = taps.rows[ky];
                    for kx in 0..ks.w {
                        let (ox0, ox1) = taps.cols[kx];
                        if ox0 >= ox1 {
                            continue;
                        }
                        let kidx = ((oc * in_pg + icl) * ks.h + ky) * ks.w + kx;
                        let wv = kdata[kidx];
                        let ix0 = input_pos(ox0, kx, &geom);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = input_pos(oy, ky, &geom);
                            let grow = &gplane[oy * wo + ox0..oy * wo + ox1];
                            let xrow = &xplane[iy * xw..(iy + 1) * xw];
                            if geom.stride == 1 {
                                for (&gv, &xv) in grow.iter().zip(&xrow[ix0..ix0 + (ox1 - ox0)]) {
                                    acc += gv * xv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc += gv * xrow[ix0 + j * geom.stride];
                                }
                            }
                        }
                        gk.data_mut()[kidx] += acc;
                        if let Some(gx) = gx.as_mut() {
                            let gxplane = gx.plane_mut(n, ic);
                            for oy in oy0..oy1 {
                                let iy = input_pos(oy, ky, &geom);
                                let grow = &gplane[oy * wo + ox0..oy * wo + ox1];
                                let gxrow = &mut gxplane[iy * xw..(iy + 1) * xw];
                                if geom.stride == 1 {
                                    for (gxv, &gv) in gxrow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(grow) {
                                        *gxv += wv * gv;
                                    }
                                } else {
                                    for (j, &gv) in grow.iter().enumerate() {
                                        gxrow[ix0 + j * geom.stride] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Applies a `(out, in)` matrix and bias at every pixel: a 1x1 convolution.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    conv2d_raw(x, weight, Some(bias), ConvGeometry::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook nested-loop convolution with explicit bounds checks.
    fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f64], g: ConvGeometry) -> Tensor {
        let xs = x.shape();
        let ks = k.shape();
        let ho = (xs.h + 2 * g.padding - g.dilation * (ks.h - 1) - 1) / g.stride + 1;
        let wo = (xs.w + 2 * g.padding - g.dilation * (ks.w - 1) - 1) / g.stride + 1;
        let in_pg = ks.c;
        let out_pg = ks.n / g.groups;
        Tensor::from_fn(Shape::new(xs.n, ks.n, ho, wo), |n, oc, oy, ox| {
            let grp = oc / out_pg;
            let mut acc = bias[oc];
            for icl in 0..in_pg {
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                            continue;
                        }
                        acc += k.at(oc, icl, ky, kx) * x.at(n, grp * in_pg + icl, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_on_single_pixel() {
        let x = Tensor::scalar(5.0);
        let w = ConvWeights {
            kernel: Tensor::scalar(1.0),
            bias: vec![0.0],
            geometry: ConvGeometry::default(),
        };
        assert_eq!(conv2d(&x, &w).unwrap().data(), &[5.0]);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = ConvWeights {
            kernel: Tensor::full(Shape::new(1, 1, 3, 3), 1.0),
            bias: vec![0.0],
            geometry: ConvGeometry::same(3, 1),
        };
        let y = conv2d(&x, &w).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn dilated_ramp_matches_nested_loops() {
        let x = Tensor::from_fn(Shape::new(1, 1, 5, 5), |_, _, h, w| (h * 5 + w) as f64);
        let k = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, h, w| (h * 3 + w) as f64 - 4.0);
        let g = ConvGeometry::same(3, 2);
        assert_eq!(g.padding, 2);
        let y = conv2d_raw(&x, &k, Some(&[0.0]), g).unwrap();
        let oracle = naive_conv(&x, &k, &[0.0], g);
        assert_eq!(y.shape(), Shape::new(1, 1, 5, 5));
        assert!(y.max_abs_diff(&oracle) < 1e-12);
        // center pixel: taps at rows/cols {0, 2, 4}
        let expected: f64 = (0..3)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .map(|(a, b)| ((a * 3 + b) as f64 - 4.0) * ((2 * a) * 5 + 2 * b) as f64)
            .sum();
        assert_eq!(y.at(0, 0, 2, 2), expected);
    }

    #[test]
    fn random_geometries_match_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases = [
            (4, 6, 3, 1, 1, 1, 1),
            (4, 4, 3, 1, 1, 2, 4),
            (2, 4, 2, 2, 0, 1, 1),
            (6, 3, 3, 2, 1, 3, 3),
            (3, 3, 1, 1, 0, 1, 1),
            (4, 8, 3, 1, 3, 3, 2),
        ];
        for (ic, oc, k, s, p, d, grp) in cases {
            let g = ConvGeometry {
                stride: s,
                padding: p,
                dilation: d,
                groups: grp,
            };
            let x = Tensor::uniform(Shape::new(2, ic, 7, 6), -1.0, 1.0, &mut rng);
            let kt = Tensor::uniform(Shape::new(oc, ic / grp, k, k), -1.0, 1.0, &mut rng);
            let b: Vec<f64> = (0..oc).map(|i| i as f64 * 0.1).collect();
            let y = conv2d_raw(&x, &kt, Some(&b), g).unwrap();
            let o = naive_conv(&x, &kt, &b, g);
            assert_eq!(y.shape(), o.shape());
            assert!(y.max_abs_diff(&o) < 1e-12, "case {:?}", (ic, oc, k, s, p, d, grp));
        }
    }

    #[test]
    fn lowered_and_direct_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cases = [(3, 5, 3, 1, 1, 1), (4, 2, 2, 2, 0, 1), (2, 3, 1, 1, 0, 1), (3, 3, 3, 1, 2, 2), (2, 2, 3, 2, 1, 1)];
        for (ic, oc, k, s, p, d) in cases {
            let g = ConvGeometry {
                stride: s,
                padding: p,
                dilation: d,
                groups: 1,
            };
            let x = Tensor::uniform(Shape::new(2, ic, 6, 7), -1.0, 1.0, &mut rng);
            let kt = Tensor::uniform(Shape::new(oc, ic, k, k), -1.0, 1.0, &mut rng);
            let b: Vec<f64> = (0..oc).map(|i| i as f64).collect();
            let os = conv_output_shape(x.shape(), kt.shape(), g).unwrap();
            let lowered = gemm_forward(&x, &kt, Some(&b), g, os);
            let direct = direct_forward(&x, &kt, Some(&b), g, os);
            assert!(lowered.max_abs_diff(&direct) < 1e-12);
            let gout = Tensor::uniform(os, -1.0, 1.0, &mut rng);
            let (gx1, gk1, gb1) = gemm_backward(&x, &kt, g, &gout, true);
            let (gx2, gk2, gb2) = direct_backward(&x, &kt, g, &gout, true);
            assert!(gx1.unwrap().max_abs_diff(&gx2.unwrap()) < 1e-12);
            assert!(gk1.max_abs_diff(&gk2) < 1e-12);
            for (a, b) in gb1.iter().zip(&gb2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(Shape::new(1, 5, 4, 3), -1.0, 1.0, &mut rng);
        let k = Tensor::full(Shape::new(5, 1, 1, 1), 1.0);
        let y = conv2d_raw(&x, &k, Some(&[0.0; 5]), ConvGeometry::default().with_groups(5)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_matches_per_pixel_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(Shape::new(2, 3, 2, 2), -1.0, 1.0, &mut rng);
        let wt = Tensor::uniform(Shape::new(4, 3, 1, 1), -1.0, 1.0, &mut rng);
        let b = [0.5, -0.5, 0.0, 1.0];
        let y = linear(&x, &wt, &b).unwrap();
        for n in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    for o in 0..4 {
                        let mut acc = b[o];
                        for i in 0..3 {
                            acc += wt.at(o, i, 0, 0) * x.at(n, i, h, w);
                        }
                        assert!((y.at(n, o, h, w) - acc).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_identity_and_constant_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(Shape::new(1, 3, 2, 3), -1.0, 1.0, &mut rng);
        let eye = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &[0.0; 3]).unwrap(), x);
        let zero = Tensor::zeros(Shape::new(2, 3, 1, 1));
        let y = linear(&x, &zero, &[1.5, 1.5]).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn mismatched_channels_name_both_shapes() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let k = Tensor::zeros(Shape::new(2, 2, 3, 3));
        let err = conv2d_raw(&x, &k, None, ConvGeometry::same(3, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x3x4x4") || msg.contains("[1, 3, 4, 4]"), "{msg}");
        assert!(msg.contains("[2, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let k = Tensor::zeros(Shape::new(1, 1, 5, 5));
        assert!(conv2d_raw(&x, &k, None, ConvGeometry::default()).is_err());
    }
}
