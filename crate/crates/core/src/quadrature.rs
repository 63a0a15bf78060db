//! Adaptive tensor-product Gauss–Hermite quadrature for few-site path
//! integrals.
//!
//! The integrand `e^{log_density(φ)}` is recentred on its mode and
//! whitened with the curvature there, so a Gaussian integrand is integrated
//! exactly by any rule and near-Gaussian ones converge within a few node
//! doublings.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::{Error, Result};

/// Path integrals are only ever evaluated on lattices this small.
pub const MAX_QUADRATURE_SITES: usize = 6;

pub trait LogDensity: Sync {
    fn n_vars(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> f64;

    /// Gradient and Hessian of the log density. The default is a central
    /// finite-difference approximation, which is only used to place and
    /// scale the quadrature rule.
    fn gradient_hessian(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        finite_difference_gradient_hessian(|y| self.log_density(y), x)
    }
}

/// Central-difference gradient and Hessian of `f` at `x`.
pub fn finite_difference_gradient_hessian<F: Fn(&[f64]) -> f64>(
    f: F,
    x: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let f0 = f(x);
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let steps: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let mut y = x.to_vec();
    for i in 0..n {
        let hi = steps[i];
        y[i] = x[i] + hi;
        let fp = f(&y);
        y[i] = x[i] - hi;
        let fm = f(&y);
        y[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * hi);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut eval = |si: f64, sj: f64| {
                y[i] = x[i] + si * hi;
                y[j] = x[j] + sj * hj;
                let v = f(&y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (grad, hess)
}

/// Nodes and log-weights for `∫ e^{-t²} g(t) dt ≈ Σ w_i g(t_i)`.
#[derive(Debug, Clone)]
pub struct GaussHermiteRule {
    pub nodes: Vec<f64>,
    pub log_weights: Vec<f64>,
}

fn compute_gauss_hermite(n: usize) -> GaussHermiteRule {
    assert!(n >= 1);
    // Golub–Welsch for the initial nodes.
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    // Newton polish with the orthonormal recurrence; the weight follows
    // from the derivative of the degree-n polynomial.
    let pi_quarter = std::f64::consts::PI.powf(-0.25);
    let mut log_weights = Vec::with_capacity(n);
    for t in nodes.iter_mut() {
        let mut deriv = 1.0;
        for _ in 0..8 {
            let mut p_prev = 0.0;
            let mut p = pi_quarter;
            for j in 0..n {
                let p_next = *t * (2.0 / (j as f64 + 1.0)).sqrt() * p
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p_prev;
                p_prev = p;
                p = p_next;
            }
            deriv = (2.0 * n as f64).sqrt() * p_prev;
            let dt = p / deriv;
            *t -= dt;
            if dt.abs() < 1e-15 * (1.0 + t.abs()) {
                break;
            }
        }
        log_weights.push((2.0f64).ln() - 2.0 * deriv.abs().ln());
    }
    GaussHermiteRule { nodes, log_weights }
}

pub fn gauss_hermite(n: usize) -> Arc<GaussHermiteRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermiteRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(compute_gauss_hermite(n)))
        .clone()
}

/// Affine frame `φ = center + transform · z` in which the integrand is
/// approximately a unit Gaussian.
#[derive(Debug, Clone)]
pub struct Frame {
    pub center: DVector<f64>,
    pub transform: DMatrix<f64>,
    pub log_abs_det: f64,
}

impl Frame {
    pub fn from_center_and_precision(center: DVector<f64>, precision: &DMatrix<f64>) -> Result<Self> {
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SingularKernel("curvature at the mode is not positive definite".into()))?;
        let l = chol.l();
        let n = center.len();
        let l_inv_t = l
            .transpose()
            .try_inverse()
            .ok_or_else(|| Error::SingularKernel("singular curvature factor".into()))?;
        let log_abs_det = -(0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(Self {
            center,
            transform: l_inv_t,
            log_abs_det,
        })
    }
}

/// Locate the mode of the density by damped Newton ascent and return the
/// whitening frame there.
pub fn laplace_frame<D: LogDensity + ?Sized>(density: &D, start: Option<&[f64]>) -> Result<Frame> {
    let n = density.n_vars();
    let mut x: Vec<f64> = start.map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut fx = density.log_density(&x);
    for _ in 0..200 {
        let (g, h) = density.gradient_hessian(&x);
        let neg_h = -&h;
        let step: DVector<f64> = match neg_h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone() * 0.1,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let ft = density.log_density(&trial);
            if ft.is_finite() && ft >= fx - 1e-14 * fx.abs().max(1.0) {
                x = trial;
                fx = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let size = step.norm() * t;
        if !accepted || size < 1e-13 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            break;
        }
    }
    let (_, h) = density.gradient_hessian(&x);
    Frame::from_center_and_precision(DVector::from_vec(x), &(-h))
}

#[derive(Debug, Clone, Copy)]
pub struct QuadratureSettings {
    pub start_nodes: usize,
    pub max_nodes: usize,
    pub tolerance: f64,
    pub max_points: usize,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            start_nodes: 8,
            max_nodes: 256,
            tolerance: 1e-9,
            max_points: 1 << 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Integral {
    pub log_z: f64,
    /// Expectations of the requested observables under the normalized density.
    pub expectations: Vec<f64>,
    pub nodes_per_site: usize,
}

/// Apply a fixed tensor-product rule in the given frame.
pub fn integrate_fixed<D, O>(density: &D, frame: &Frame, nodes: usize, n_obs: usize, observables: &O) -> Integral
where
    D: LogDensity + ?Sized,
    O: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = density.n_vars();
    let rule = gauss_hermite(nodes);
    let sqrt2 = std::f64::consts::SQRT_2;
    let log_ref = density.log_density(frame.center.as_slice());
    // log(w) + t² per node: the Gaussian factor of the rule is undone.
    let lw: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.log_weights)
        .map(|(t, w)| w + t * t)
        .collect();

    let partial = |outer: usize| -> (f64, Vec<f64>) {
        let mut sum = 0.0;
        let mut obs_sum = vec![0.0; n_obs];
        let mut obs = vec![0.0; n_obs];
        let mut idx = vec![0usize; n];
        idx[0] = outer;
        let mut z = vec![0.0; n];
        let mut phi = vec![0.0; n];
        loop {
            let mut log_w = 0.0;
            for d in 0..n {
                z[d] = sqrt2 * rule.nodes[idx[d]];
                log_w += lw[idx[d]];
            }
            for (i, slot) in phi.iter_mut().enumerate() {
                let mut v = frame.center[i];
                for (d, zd) in z.iter().enumerate() {
                    v += frame.transform[(i, d)] * zd;
                }
                *slot = v;
            }
            let lf = density.log_density(&phi) - log_ref + log_w;
            let w = lf.exp();
            if w > 0.0 {
                sum += w;
                if n_obs > 0 {
                    observables(&phi, &mut obs);
                    for (acc, o) in obs_sum.iter_mut().zip(&obs) {
                        *acc += w * o;
                    }
                }
            }
            // Odometer over all but the outermost coordinate.
            let mut d = 1;
            loop {
                if d >= n {
                    return (sum, obs_sum);
                }
                idx[d] += 1;
                if idx[d] < nodes {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    };

    let parts: Vec<(f64, Vec<f64>)> = (0..nodes).into_par_iter().map(partial).collect();
    let mut total = 0.0;
    let mut obs_total = vec![0.0; n_obs];
    for (s, o) in &parts {
        total += s;
        for (acc, v) in obs_total.iter_mut().zip(o) {
            *acc += v;
        }
    }
    let log_z = log_ref + frame.log_abs_det + 0.5 * n as f64 * (2.0f64).ln() + total.ln();
    Integral {
        log_z,
        expectations: obs_total.iter().map(|v| v / total).collect(),
        nodes_per_site: nodes,
    }
}

/// Node-doubling quadrature: stops once `ln Z` and every expectation change
/// by less than the tolerance between successive rules.
pub fn integrate<D, O>(
    density: &D,
    frame: &Frame,
    n_obs: usize,
    observables: &O,
    settings: &QuadratureSettings,
) -> Result<Integral>
where
    D: LogDensity + ?Sized,
    O: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = density.n_vars();
    if n > MAX_QUADRATURE_SITES {
        return Err(Error::ScaleExceeded {
            sites: n,
            limit: MAX_QUADRATURE_SITES,
        });
    }
    let mut nodes = settings.start_nodes.max(1);
    let mut prev = integrate_fixed(density, frame, nodes, n_obs, observables);
    let mut change = f64::INFINITY;
    loop {
        let next_nodes = nodes * 2;
        let points = (next_nodes as f64).powi(n as i32);
        if next_nodes > settings.max_nodes || points > settings.max_points as f64 {
            return Err(Error::QuadratureNonConvergence { nodes, change });
        }
        let next = integrate_fixed(density, frame, next_nodes, n_obs, observables);
        change = (next.log_z - prev.log_z).abs();
        for (a, b) in next.expectations.iter().zip(&prev.expectations) {
            change = change.max((a - b).abs() / a.abs().max(1.0));
        }
        if !change.is_finite() {
            return Err(Error::QuadratureNonConvergence { nodes: next_nodes, change });
        }
        if change < settings.tolerance {
            return Ok(next);
        }
        nodes = next_nodes;
        prev = next;
    }
}

/// Composite Simpson rule on a uniform grid with an even number of intervals
/// (falls back to the trapezoid rule otherwise).
pub fn simpson_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    if (n - 1) % 2 != 0 {
        let inner: f64 = values[1..n - 1].iter().sum();
        return h * (0.5 * (values[0] + values[n - 1]) + inner);
    }
    let mut s = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}
