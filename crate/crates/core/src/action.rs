//! Lattice φ⁴ bare action and its log-partition function.
//!
//! `S[φ] = a^d Σ_x [½(∇φ)² + ½m²φ² + (λ/4!)φ⁴]` with forward-difference
//! gradients on a periodic lattice. Sources couple as `a^d Σ_x J(x) φ(x)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::lattice::{dft_forward, momentum_grid, FieldConfig, LatticeSpec, MomentumVector};
use crate::quadrature::{self, Frame, Integral, LogDensity, QuadratureSettings};
use crate::{Error, Result};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BareActionParams {
    pub mass_sq: f64,
    pub quartic: f64,
    pub kinetic: bool,
    pub lattice: LatticeSpec,
}

impl BareActionParams {
    pub fn new(lattice: LatticeSpec, mass_sq: f64, quartic: f64, kinetic: bool) -> Result<Self> {
        if !mass_sq.is_finite() || !quartic.is_finite() {
            return Err(Error::InvalidParameter("couplings must be finite".into()));
        }
        if quartic < 0.0 {
            return Err(Error::InvalidParameter(format!("quartic coupling must be nonnegative, got {quartic}")));
        }
        if quartic == 0.0 && mass_sq <= 0.0 {
            return Err(Error::InvalidParameter(
                "a free theory needs a positive mass_sq to be normalizable".into(),
            ));
        }
        Ok(Self {
            mass_sq,
            quartic,
            kinetic,
            lattice,
        })
    }

    /// Single-site theory `½m²φ² + λφ⁴/24`.
    pub fn zero_dimensional(mass_sq: f64, quartic: f64) -> Result<Self> {
        Self::new(LatticeSpec::zero_dimensional(), mass_sq, quartic, true)
    }

    pub fn is_gaussian(&self) -> bool {
        self.quartic == 0.0
    }

    /// Local potential `½m²φ² + λφ⁴/24`.
    pub fn potential(&self, phi: f64) -> f64 {
        let p2 = phi * phi;
        0.5 * self.mass_sq * p2 + self.quartic * p2 * p2 / 24.0
    }

    pub fn potential_d1(&self, phi: f64) -> f64 {
        self.mass_sq * phi + self.quartic * phi * phi * phi / 6.0
    }

    pub fn potential_d2(&self, phi: f64) -> f64 {
        self.mass_sq + 0.5 * self.quartic * phi * phi
    }

    /// Eigenvalue of the quadratic kernel `-Δ + m²` (per unit measure) at `p`.
    pub fn kernel_eigenvalue(&self, p: &MomentumVector) -> f64 {
        let kin = if self.kinetic { p.hat_sq(&self.lattice) } else { 0.0 };
        kin + self.mass_sq
    }

    /// Characteristic field width `(m² + λ)^{-1/2}` used to scale grids.
    pub fn field_scale(&self) -> f64 {
        let s = self.mass_sq.max(0.0) + self.quartic;
        1.0 / s.sqrt()
    }

    /// Largest bare mass scale squared, `max(m², λ^{2/3})`.
    pub fn mass_scale_sq(&self) -> f64 {
        self.mass_sq.abs().max(self.quartic.powf(2.0 / 3.0))
    }

    pub(crate) fn action_of(&self, phi: &[f64]) -> f64 {
        let l = &self.lattice;
        let mut s = 0.0;
        let inv_a2 = 1.0 / (l.spacing() * l.spacing());
        for (x, &v) in phi.iter().enumerate() {
            let mut local = self.potential(v);
            if self.kinetic {
                for mu in 0..l.dim() {
                    let d = phi[l.neighbor(x, mu, true)] - v;
                    local += 0.5 * d * d * inv_a2;
                }
            }
            s += local;
        }
        s * l.measure()
    }

    pub(crate) fn gradient_of(&self, phi: &[f64]) -> Vec<f64> {
        let l = &self.lattice;
        let inv_a2 = 1.0 / (l.spacing() * l.spacing());
        phi.iter()
            .enumerate()
            .map(|(x, &v)| {
                let mut g = self.potential_d1(v);
                if self.kinetic {
                    for mu in 0..l.dim() {
                        let fwd = phi[l.neighbor(x, mu, true)];
                        let bwd = phi[l.neighbor(x, mu, false)];
                        g += (2.0 * v - fwd - bwd) * inv_a2;
                    }
                }
                g * l.measure()
            })
            .collect()
    }

    pub(crate) fn hessian_of(&self, phi: &[f64]) -> DMatrix<f64> {
        let l = &self.lattice;
        let n = phi.len();
        let inv_a2 = 1.0 / (l.spacing() * l.spacing());
        let mut h = DMatrix::zeros(n, n);
        for (x, &v) in phi.iter().enumerate() {
            h[(x, x)] += self.potential_d2(v);
            if self.kinetic {
                for mu in 0..l.dim() {
                    h[(x, x)] += 2.0 * inv_a2;
                    h[(x, l.neighbor(x, mu, true))] -= inv_a2;
                    h[(x, l.neighbor(x, mu, false))] -= inv_a2;
                }
            }
        }
        h * l.measure()
    }

    /// Change in `S` when site `x` of `phi` is set to `new_value`, computed
    /// from the local terms only.
    pub(crate) fn local_delta(&self, phi: &[f64], x: usize, new_value: f64) -> f64 {
        let l = &self.lattice;
        let old = phi[x];
        let mut ds = self.potential(new_value) - self.potential(old);
        if self.kinetic {
            let inv_a2 = 1.0 / (l.spacing() * l.spacing());
            for mu in 0..l.dim() {
                let fwd = l.neighbor(x, mu, true);
                let bwd = l.neighbor(x, mu, false);
                if fwd == x {
                    continue;
                }
                let f = phi[fwd];
                let b = phi[bwd];
                if fwd == bwd {
                    // Two sites per axis: both bonds touch the same neighbour.
                    ds += ((new_value - f).powi(2) - (old - f).powi(2)) * inv_a2;
                } else {
                    ds += 0.5 * ((f - new_value).powi(2) - (f - old).powi(2)) * inv_a2;
                    ds += 0.5 * ((new_value - b).powi(2) - (old - b).powi(2)) * inv_a2;
                }
            }
        }
        ds * l.measure()
    }
}

/// Real source per site, `J(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceField {
    pub values: Vec<f64>,
}

impl SourceField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn zeros(lattice: &LatticeSpec) -> Self {
        Self {
            values: vec![0.0; lattice.sites()],
        }
    }

    pub fn uniform(lattice: &LatticeSpec, j: f64) -> Self {
        Self {
            values: vec![j; lattice.sites()],
        }
    }

    fn check(&self, lattice: &LatticeSpec) -> Result<()> {
        if self.values.len() != lattice.sites() {
            return Err(Error::DimensionMismatch {
                expected: lattice.sites(),
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

fn check_config(cfg: &FieldConfig, params: &BareActionParams) -> Result<()> {
    if cfg.lattice() != &params.lattice {
        return Err(Error::DimensionMismatch {
            expected: params.lattice.sites(),
            got: cfg.values().len(),
        });
    }
    Ok(())
}

pub fn evaluate_action(cfg: &FieldConfig, params: &BareActionParams) -> Result<f64> {
    check_config(cfg, params)?;
    let s = params.action_of(cfg.values());
    if !s.is_finite() {
        return Err(Error::NonFinite(0));
    }
    Ok(s)
}

/// `∂S/∂φ(x)` and `∂²S/∂φ(x)∂φ(y)`.
pub fn action_derivatives(cfg: &FieldConfig, params: &BareActionParams) -> Result<(SourceField, DMatrix<f64>)> {
    evaluate_action(cfg, params)?;
    let g = params.gradient_of(cfg.values());
    let h = params.hessian_of(cfg.values());
    Ok((SourceField { values: g }, h))
}

/// The sourced Boltzmann weight `-S[φ] + a^d Σ J φ` as an integrand.
pub struct SourcedAction<'a> {
    pub params: &'a BareActionParams,
    pub source: &'a [f64],
}

impl LogDensity for SourcedAction<'_> {
    fn n_vars(&self) -> usize {
        self.params.lattice.sites()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let coupling: f64 = self.source.iter().zip(x).map(|(j, p)| j * p).sum();
        -self.params.action_of(x) + self.params.lattice.measure() * coupling
    }

    fn gradient_hessian(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.params.lattice.measure();
        let g = self.params.gradient_of(x);
        let grad = DVector::from_iterator(x.len(), g.iter().zip(self.source).map(|(g, j)| m * j - g));
        (grad, -self.params.hessian_of(x))
    }
}

impl SourcedAction<'_> {
    /// Whitening frame for the quadrature. Falls back to the origin with the
    /// scale `(m² + λ)` when the mode is not a strict maximum (double wells,
    /// massless quartic theories).
    pub fn frame(&self) -> Result<Frame> {
        if self.params.mass_sq > 0.0 {
            if let Ok(f) = quadrature::laplace_frame(self, None) {
                return Ok(f);
            }
        }
        let n = self.n_vars();
        let l = &self.params.lattice;
        let kin = if self.params.kinetic {
            2.0 * l.dim() as f64 / (l.spacing() * l.spacing())
        } else {
            0.0
        };
        let scale = (self.params.mass_sq.max(0.0) + self.params.quartic + kin) * l.measure();
        Frame::from_center_and_precision(DVector::zeros(n), &(DMatrix::identity(n, n) * scale))
    }
}

/// Quadrature of the sourced partition function with observables evaluated
/// on the same rule.
pub fn sourced_integral<O>(
    params: &BareActionParams,
    source: &SourceField,
    n_obs: usize,
    observables: &O,
    settings: &QuadratureSettings,
) -> Result<Integral>
where
    O: Fn(&[f64], &mut [f64]) + Sync,
{
    source.check(&params.lattice)?;
    let sites = params.lattice.sites();
    if sites > quadrature::MAX_QUADRATURE_SITES {
        return Err(Error::ScaleExceeded {
            sites,
            limit: quadrature::MAX_QUADRATURE_SITES,
        });
    }
    let density = SourcedAction {
        params,
        source: &source.values,
    };
    let frame = density.frame()?;
    quadrature::integrate(&density, &frame, n_obs, observables, settings)
}

/// `ln ∫Dφ e^{-S[φ] + a^d Σ J φ}` by adaptive tensor-product quadrature.
pub fn log_partition_quadrature(params: &BareActionParams, source: &SourceField) -> Result<f64> {
    let none = |_: &[f64], _: &mut [f64]| {};
    Ok(sourced_integral(params, source, 0, &none, &QuadratureSettings::default())?.log_z)
}

/// Exact `ln Z[J]` of the free theory, evaluated mode by mode:
/// `½ Σ_p |J̃(p)|²/(V K(p)) − ½ Σ_p ln(a^d K(p)/2π)`.
pub fn log_partition_gaussian(params: &BareActionParams, source: &SourceField) -> Result<f64> {
    if !params.is_gaussian() {
        return Err(Error::InvalidParameter("log_partition_gaussian requires quartic = 0".into()));
    }
    source.check(&params.lattice)?;
    let l = &params.lattice;
    let jt = dft_forward(&FieldConfig::new(*l, source.values.clone())?);
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for (p, jp) in momentum_grid(l).iter().zip(&jt) {
        let k = params.kernel_eigenvalue(p);
        if k <= 0.0 {
            return Err(Error::SingularKernel(format!("kernel eigenvalue {k} at mode {:?}", p.modes())));
        }
        quad += jp.norm_sqr() / (l.volume() * k);
        log_det += (l.measure() * k / TWO_PI).ln();
    }
    Ok(0.5 * quad - 0.5 * log_det)
}

/// Hessian of `ln Z[J]` w.r.t. the source components, i.e. the connected
/// two-point covariance `a^{2d} ⟨φ(x)φ(y)⟩_c`, by quadrature.
pub fn log_partition_hessian(params: &BareActionParams, source: &SourceField) -> Result<DMatrix<f64>> {
    let n = params.lattice.sites();
    let m = params.lattice.measure();
    let n_obs = n + n * n;
    let obs = |x: &[f64], out: &mut [f64]| {
        out[..n].copy_from_slice(x);
        for i in 0..n {
            for j in 0..n {
                out[n + i * n + j] = x[i] * x[j];
            }
        }
    };
    let r = sourced_integral(params, source, n_obs, &obs, &QuadratureSettings::default())?;
    let mean = &r.expectations[..n];
    Ok(DMatrix::from_fn(n, n, |i, j| {
        m * m * (r.expectations[n + i * n + j] - mean[i] * mean[j])
    }))
}
