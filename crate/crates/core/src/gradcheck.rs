//! Central-difference gradient checking.
//!
//! The error of one coordinate is `|analytic - fd| / max(1, |fd|)`. A
//! non-finite analytic or numeric value is reported as an infinite error.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Coordinates checked per tensor; all of them when `None`.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: DEFAULT_EPS,
            max_probes: None,
            seed: 0,
        }
    }
}

impl GradcheckOptions {
    pub fn probes(mut self, n: usize) -> Self {
        self.max_probes = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

impl GradcheckReport {
    fn new() -> Self {
        GradcheckReport {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    fn record(&mut self, tensor: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || (err.is_nan() && !self.max_rel_error.is_infinite()) {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = Some((tensor, coord));
        }
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max relative error between the gradient `grad` of scalar `f` at `theta`
/// and its central difference.
pub fn fd_gradcheck(f: impl Fn(&[f64]) -> f64, theta: &[f64], grad: &[f64], eps: f64) -> f64 {
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let fd = central(&mut probe, i, eps, |p| Ok(f(p))).unwrap_or(f64::NAN);
        worst = worst.max(rel_error(grad[i], fd));
    }
    worst
}

fn central(probe: &mut [f64], i: usize, eps: f64, f: impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let orig = probe[i];
    probe[i] = orig + eps;
    let plus = f(probe)?;
    probe[i] = orig - eps;
    let minus = f(probe)?;
    probe[i] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

fn probe_indices(len: usize, opts: &GradcheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_probes {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn scalar_of(g: &Graph<'_>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid("gradcheck", "function must return a scalar"));
    }
    Ok(t.data()[0])
}

/// Checks gradients with respect to free leaf tensors. `build` receives the
/// graph and one variable per input and returns the scalar output.
pub fn check_graph_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::standalone();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradcheckReport::new();
    let mut work = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let analytic = grads.of(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for i in probe_indices(inputs[ti].numel(), opts, ti as u64) {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            report.record(ti, i, analytic.data()[i], (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to the stored parameters `ids` (all of them
/// when empty). `build` runs a forward pass over the given store.
pub fn check_param_gradients(
    store: &ParamStore,
    ids: &[ParamId],
    build: impl Fn(&mut Graph<'_>) -> Result<Var>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let mut g = Graph::new(store);
    let out = build(&mut g)?;
    let grads = g.backward(out)?;
    let mut report = GradcheckReport::new();
    let mut work = store.clone();
    for &id in &ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in probe_indices(store.get(id).numel(), opts, id.index() as u64) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = {
                let mut g = Graph::new(&work);
                let out = build(&mut g)?;
                scalar_of(&g, out)?
            };
            work.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = {
                let mut g = Graph::new(&work);
                let out = build(&mut g)?;
                scalar_of(&g, out)?
            };
            work.get_mut(id).data_mut()[i] = orig;
            report.record(id.index(), i, analytic.data()[i], (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_exact_gradient_passes() {
        let f = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>();
        let theta = [0.5, -1.5, 2.0];
        let grad: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        assert!(fd_gradcheck(f, &theta, &grad, DEFAULT_EPS) < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |t: &[f64]| t[0].sin();
        assert!(fd_gradcheck(f, &[0.3], &[0.0], DEFAULT_EPS) > 0.5);
    }

    #[test]
    fn non_finite_is_failure() {
        let f = |t: &[f64]| t[0].ln();
        assert!(fd_gradcheck(f, &[0.0], &[1.0], DEFAULT_EPS).is_infinite());
        assert!(rel_error(f64::NAN, 1.0).is_infinite());
    }

    #[test]
    fn probe_subset_is_sorted_and_distinct() {
        let idx = probe_indices(100, &GradcheckOptions::default().probes(10).seed(3), 1);
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
}
