//! The flow read as a stack of sampling layers indexed by `k`.
//!
//! A layer at scale `k`, conditioned on the field `φ_a` of the layer above,
//! draws `φ` from
//!
//! `ln P_a[φ]_k = −S[φ] + a^d Σ_x (δΠ_k/δφ_a)(x) φ(x) + T_a[φ]_k + const`
//!
//! where `T_a` is the regulator coupling between the two layers. The top of
//! the stack (`φ_a` marginal at `k → ∞`) is `e^{−S}/Z₀`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{log_partition_quadrature, BareActionParams, SourceField};
use crate::export::{fmt_num, serialize_f64};
use crate::flow::{wetterich_rhs, FlowState, FlowTrajectory, Functional};
use crate::lattice::{FieldConfig, LatticeSpec};
use crate::quadrature::{self, LogDensity, QuadratureSettings};
use crate::regulator::{RegulatorFamily, RegulatorSpec};
use crate::{Error, Result};

/// Normalized densities and the input-distribution audit are evaluated by
/// quadrature only on lattices this small.
pub const ORACLE_SITES: usize = 2;

#[derive(Debug, Clone)]
pub struct CascadeSpec {
    pub params: BareActionParams,
    pub family: RegulatorFamily,
    /// Decreasing scales, one per layer; `k_grid[0] = Λ`.
    pub k_grid: Vec<f64>,
    pub trajectory: FlowTrajectory,
}

impl CascadeSpec {
    /// Layers on the trajectory's own k-grid.
    pub fn new(params: BareActionParams, trajectory: FlowTrajectory) -> Result<Self> {
        let k_grid = trajectory.k_grid();
        Self::with_k_grid(params, k_grid, trajectory)
    }

    pub fn with_k_grid(params: BareActionParams, k_grid: Vec<f64>, trajectory: FlowTrajectory) -> Result<Self> {
        let traj_grid = trajectory.k_grid();
        if traj_grid.is_empty() || k_grid.len() != traj_grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} layers against a trajectory of {} states",
                k_grid.len(),
                traj_grid.len()
            )));
        }
        for (a, b) in k_grid.iter().zip(&traj_grid) {
            if (a - b).abs() > 1e-12 * b.abs().max(1e-300) {
                return Err(Error::GridMismatch(format!("layer scale {a} vs trajectory scale {b}")));
            }
        }
        if k_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::GridMismatch("k_grid must be strictly decreasing".into()));
        }
        if trajectory.endpoint().functional.lattice() != &params.lattice {
            return Err(Error::GridMismatch("trajectory lattice differs from the action's".into()));
        }
        Ok(Self {
            params,
            family: trajectory.settings.family,
            k_grid,
            trajectory,
        })
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.params.lattice
    }

    pub fn layers(&self) -> usize {
        self.k_grid.len()
    }

    pub fn layer(&self, i: usize) -> &FlowState {
        &self.trajectory.states[i]
    }

    pub fn regulator(&self, k: f64) -> RegulatorSpec {
        RegulatorSpec {
            family: self.family,
            scale: k,
            lattice: self.params.lattice,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    /// Metropolis sweeps discarded per chain.
    pub burn_in: usize,
    /// Sweeps between recorded configurations.
    pub thinning: usize,
    pub chains: usize,
    /// Half-width of the uniform site proposal; defaults to
    /// `2.4 / sqrt(local curvature)`.
    pub proposal_width: Option<f64>,
    /// Cells of the tabulated CDF used on single-site lattices.
    pub cdf_cells: usize,
    /// Keep every Metropolis decision for auditing.
    pub record_proposals: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            burn_in: 1000,
            thinning: 10,
            chains: 1,
            proposal_width: None,
            cdf_cells: 1 << 16,
            record_proposals: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProposalRecord {
    pub chain: usize,
    pub site: usize,
    pub old: f64,
    pub new: f64,
    pub delta_log_density: f64,
    pub uniform: f64,
    pub accepted: bool,
}

/// Configurations stored row-major, one row of `sites` values per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub lattice: LatticeSpec,
    pub data: Vec<f64>,
    pub seed: u64,
    pub acceptance_rate: f64,
    pub layer_k: f64,
    pub mean: f64,
    pub variance: f64,
    pub proposals: Vec<ProposalRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchSidecar {
    pub seed: u64,
    #[serde(serialize_with = "serialize_f64")]
    pub k: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub acceptance_rate: f64,
    pub n_samples: usize,
    pub sites: usize,
    #[serde(serialize_with = "serialize_f64")]
    pub mean: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub variance: f64,
}

impl SampleBatch {
    fn from_data(lattice: LatticeSpec, data: Vec<f64>, seed: u64, acceptance_rate: f64, layer_k: f64) -> Self {
        let n = data.len().max(1) as f64;
        let mean = data.iter().sum::<f64>() / n;
        let variance = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            lattice,
            data,
            seed,
            acceptance_rate,
            layer_k,
            mean,
            variance,
            proposals: Vec::new(),
        }
    }

    pub fn sites(&self) -> usize {
        self.lattice.sites()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.sites()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn config(&self, i: usize) -> &[f64] {
        let s = self.sites();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.sites())
    }

    /// The first `n` draws with moments recomputed; proposal logs are dropped.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let data = self.data[..n * self.sites()].to_vec();
        Self::from_data(self.lattice, data, self.seed, self.acceptance_rate, self.layer_k)
    }

    pub fn configs(&self) -> Vec<FieldConfig> {
        self.iter()
            .map(|c| FieldConfig::new(self.lattice, c.to_vec()).expect("batch rows match the lattice"))
            .collect()
    }

    /// One row per configuration, one column per site.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.sites()).map(|i| format!("site_{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.iter() {
            let line: Vec<String> = row.iter().map(|&v| fmt_num(v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn sidecar(&self) -> BatchSidecar {
        BatchSidecar {
            seed: self.seed,
            k: self.layer_k,
            acceptance_rate: self.acceptance_rate,
            n_samples: self.len(),
            sites: self.sites(),
            mean: self.mean,
            variance: self.variance,
        }
    }
}

/// Position-space regulator bilinear: `T_a[φ] = φ_aᵀ M φ − ½ φᵀ M φ` with
/// `M_xy = a^{2d} R̂_k(x − y)`.
fn regulator_matrix(reg: &RegulatorSpec) -> DMatrix<f64> {
    let l = &reg.lattice;
    let kernel = reg.position_kernel();
    let m2 = l.measure() * l.measure();
    DMatrix::from_fn(l.sites(), l.sites(), |x, y| m2 * kernel[l.sub_sites(x, y)])
}

/// `−S[φ] + drive·φ − ½ φᵀMφ`.
struct LayerDensity<'a> {
    params: &'a BareActionParams,
    drive: Vec<f64>,
    coupling: DMatrix<f64>,
}

impl<'a> LayerDensity<'a> {
    fn new(params: &'a BareActionParams, phi_a: &[f64], layer: Option<(&FlowState, &RegulatorSpec)>) -> Result<Self> {
        let n = params.lattice.sites();
        let Some((state, reg)) = layer else {
            return Ok(Self {
                params,
                drive: vec![0.0; n],
                coupling: DMatrix::zeros(n, n),
            });
        };
        let m = params.lattice.measure();
        let d = state.functional.derivative(phi_a)?;
        let coupling = regulator_matrix(&reg.with_scale(state.k));
        let ma = &coupling * DVector::from_column_slice(phi_a);
        let drive = d.iter().zip(ma.iter()).map(|(d, r)| m * d + r).collect();
        Ok(Self {
            params,
            drive,
            coupling,
        })
    }

    fn local_delta(&self, phi: &[f64], coupled: &[f64], x: usize, new: f64) -> f64 {
        let delta = new - phi[x];
        -self.params.local_delta(phi, x, new) + self.drive[x] * delta
            - delta * coupled[x]
            - 0.5 * delta * delta * self.coupling[(x, x)]
    }
}

impl LogDensity for LayerDensity<'_> {
    fn n_vars(&self) -> usize {
        self.drive.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        let lin: f64 = self.drive.iter().zip(x).map(|(a, b)| a * b).sum();
        -self.params.action_of(x) + lin - 0.5 * v.dot(&(&self.coupling * &v))
    }

    fn gradient_hessian(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let v = DVector::from_column_slice(x);
        let g = self.params.gradient_of(x);
        let mv = &self.coupling * &v;
        let grad = DVector::from_iterator(x.len(), (0..x.len()).map(|i| self.drive[i] - g[i] - mv[i]));
        (grad, -self.params.hessian_of(x) - &self.coupling)
    }
}

fn check_field(phi: &FieldConfig, spec: &CascadeSpec) -> Result<()> {
    if phi.lattice() != spec.lattice() {
        return Err(Error::DimensionMismatch {
            expected: spec.lattice().sites(),
            got: phi.values().len(),
        });
    }
    Ok(())
}

/// Unnormalized layer log-density.
pub fn layer_log_density(phi: &FieldConfig, phi_a: &FieldConfig, layer: &FlowState, spec: &CascadeSpec) -> Result<f64> {
    check_field(phi, spec)?;
    check_field(phi_a, spec)?;
    let reg = spec.regulator(layer.k);
    let d = LayerDensity::new(&spec.params, phi_a.values(), Some((layer, &reg)))?;
    Ok(d.log_density(phi.values()))
}

/// `ln ∫Dφ P_a[φ]_k` (unnormalized density) by quadrature.
pub fn layer_log_normalizer(phi_a: &FieldConfig, layer: &FlowState, spec: &CascadeSpec) -> Result<f64> {
    check_field(phi_a, spec)?;
    let sites = spec.lattice().sites();
    if sites > ORACLE_SITES {
        return Err(Error::ScaleExceeded {
            sites,
            limit: ORACLE_SITES,
        });
    }
    let reg = spec.regulator(layer.k);
    let d = LayerDensity::new(&spec.params, phi_a.values(), Some((layer, &reg)))?;
    let frame = match quadrature::laplace_frame(&d, Some(phi_a.values())) {
        Ok(f) => f,
        Err(_) => {
            let scale = spec.params.mass_sq.abs() + spec.params.quartic + 1.0;
            quadrature::Frame::from_center_and_precision(
                DVector::zeros(sites),
                &(DMatrix::identity(sites, sites) * scale),
            )?
        }
    };
    let none = |_: &[f64], _: &mut [f64]| {};
    Ok(quadrature::integrate(&d, &frame, 0, &none, &QuadratureSettings::default())?.log_z)
}

/// Layer log-density normalized by quadrature (at most two sites).
pub fn normalized_layer_log_density(
    phi: &FieldConfig,
    phi_a: &FieldConfig,
    layer: &FlowState,
    spec: &CascadeSpec,
) -> Result<f64> {
    let log_z = layer_log_normalizer(phi_a, layer, spec)?;
    Ok(layer_log_density(phi, phi_a, layer, spec)? - log_z)
}

/// Tabulated inverse CDF with a piecewise-linear density between nodes.
struct InverseCdf {
    lo: f64,
    h: f64,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl InverseCdf {
    fn build<F: Fn(f64) -> f64>(log_p: F, start: f64, curvature_hint: f64, cells: usize) -> Result<Self> {
        // Walk to the nearest mode so the bracket is centred sensibly.
        let mut c = start;
        let fd = |x: f64| {
            let e = 1e-4 * (1.0 + x.abs());
            let (fp, f0, fm) = (log_p(x + e), log_p(x), log_p(x - e));
            ((fp - fm) / (2.0 * e), (fp - 2.0 * f0 + fm) / (e * e))
        };
        for _ in 0..100 {
            let (g, h) = fd(c);
            if !(h < 0.0) || !g.is_finite() {
                break;
            }
            let step = (-g / h).clamp(-1.0, 1.0);
            c += step;
            if step.abs() < 1e-10 {
                break;
            }
        }
        let (_, h) = fd(c);
        let s = if h < 0.0 { 1.0 / (-h).sqrt() } else { 1.0 / curvature_hint.sqrt() };
        let mut peak = log_p(c);
        let expand = |dir: f64, peak: &mut f64| -> Result<f64> {
            let mut step = s;
            let mut x = c;
            for _ in 0..400 {
                x += dir * step;
                let v = log_p(x);
                if v.is_finite() && v > *peak {
                    *peak = v;
                }
                if !v.is_finite() || v < *peak - 45.0 {
                    return Ok(x);
                }
                step *= 1.2;
            }
            Err(Error::InvalidParameter("layer density is not normalizable".into()))
        };
        let hi = expand(1.0, &mut peak)?;
        let lo = expand(-1.0, &mut peak)?;
        let cells = cells.max(16);
        let h = (hi - lo) / cells as f64;
        let logs: Vec<f64> = (0..=cells).map(|i| log_p(lo + i as f64 * h)).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|v| (v - max).exp()).collect();
        let mut cumulative = Vec::with_capacity(cells + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in weights.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            cumulative.push(acc);
        }
        Ok(Self {
            lo,
            h,
            weights,
            cumulative,
        })
    }

    fn sample(&self, u: f64) -> f64 {
        let total = *self.cumulative.last().unwrap();
        let target = u * total;
        let j = self
            .cumulative
            .partition_point(|&c| c <= target)
            .saturating_sub(1)
            .min(self.weights.len() - 2);
        let r = target - self.cumulative[j];
        let w0 = self.weights[j];
        let slope = (self.weights[j + 1] - w0) / self.h;
        // Solve w0 s + ½ slope s² = r for s in [0, h].
        let s = if slope.abs() * self.h < 1e-12 * w0.max(1e-300) {
            r / w0
        } else {
            let disc = (w0 * w0 + 2.0 * slope * r).max(0.0);
            2.0 * r / (w0 + disc.sqrt())
        };
        self.lo + j as f64 * self.h + s.clamp(0.0, self.h)
    }
}

fn draw(
    density: &LayerDensity,
    lattice: &LatticeSpec,
    start: &[f64],
    n: usize,
    seed: u64,
    layer_k: f64,
    settings: &SamplerSettings,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let sites = lattice.sites();
    let params = density.params;
    let curvature_hint = params.mass_sq.max(0.0) + params.quartic + density.coupling[(0, 0)] + 1e-300;
    if sites == 1 {
        let table = InverseCdf::build(|x| density.log_density(&[x]), start[0], curvature_hint, settings.cdf_cells)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n).map(|_| table.sample(rng.random::<f64>())).collect();
        return Ok(SampleBatch::from_data(*lattice, data, seed, 1.0, layer_k));
    }

    let l = lattice;
    let kin = if params.kinetic {
        2.0 * l.dim() as f64 / (l.spacing() * l.spacing())
    } else {
        0.0
    };
    let local_curv =
        l.measure() * (params.mass_sq.max(0.0) + 0.5 * params.quartic * params.field_scale().powi(2) + kin)
            + density.coupling[(0, 0)];
    let width = settings.proposal_width.unwrap_or(2.4 / local_curv.sqrt());
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::InvalidParameter("proposal width must be positive".into()));
    }
    let chains = settings.chains.max(1);
    let per_chain = n.div_ceil(chains);
    let thinning = settings.thinning.max(1);

    let run_chain = |c: usize| -> (Vec<f64>, usize, usize, Vec<ProposalRecord>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
        let mut phi = start.to_vec();
        let mut coupled: Vec<f64> = (&density.coupling * DVector::from_column_slice(&phi)).iter().copied().collect();
        let mut out = Vec::with_capacity(per_chain * sites);
        let mut log = Vec::new();
        let (mut accepted, mut proposed) = (0usize, 0usize);
        let mut sweep = |phi: &mut Vec<f64>, coupled: &mut Vec<f64>, count: bool, log: &mut Vec<ProposalRecord>| {
            for x in 0..sites {
                let new = phi[x] + width * (2.0 * rng.random::<f64>() - 1.0);
                let delta = density.local_delta(phi, coupled, x, new);
                let u: f64 = rng.random();
                let accept = u.ln() < delta;
                if settings.record_proposals {
                    log.push(ProposalRecord {
                        chain: c,
                        site: x,
                        old: phi[x],
                        new,
                        delta_log_density: delta,
                        uniform: u,
                        accepted: accept,
                    });
                }
                if count {
                    proposed += 1;
                    if accept {
                        accepted += 1;
                    }
                }
                if accept {
                    let d = new - phi[x];
                    for (y, cy) in coupled.iter_mut().enumerate() {
                        *cy += d * density.coupling[(y, x)];
                    }
                    phi[x] = new;
                }
            }
        };
        for _ in 0..settings.burn_in {
            sweep(&mut phi, &mut coupled, false, &mut log);
        }
        for _ in 0..per_chain {
            for _ in 0..thinning {
                sweep(&mut phi, &mut coupled, true, &mut log);
            }
            out.extend_from_slice(&phi);
        }
        (out, accepted, proposed, log)
    };
    let results: Vec<_> = (0..chains).into_par_iter().map(run_chain).collect();
    let mut data = Vec::with_capacity(n * sites);
    let (mut acc, mut prop) = (0usize, 0usize);
    let mut proposals = Vec::new();
    for (d, a, p, log) in results {
        data.extend(d);
        acc += a;
        prop += p;
        proposals.extend(log);
    }
    data.truncate(n * sites);
    let rate = acc as f64 / prop.max(1) as f64;
    if rate < 0.05 {
        return Err(Error::LowAcceptance(rate));
    }
    let mut batch = SampleBatch::from_data(*lattice, data, seed, rate, layer_k);
    batch.proposals = proposals;
    Ok(batch)
}

/// Draw `n` fields from the layer at `layer.k` conditioned on `φ_a`.
pub fn sample_layer(
    phi_a: &FieldConfig,
    layer: &FlowState,
    spec: &CascadeSpec,
    n: usize,
    seed: u64,
    settings: &SamplerSettings,
) -> Result<SampleBatch> {
    check_field(phi_a, spec)?;
    let reg = spec.regulator(layer.k);
    let d = LayerDensity::new(&spec.params, phi_a.values(), Some((layer, &reg)))?;
    draw(&d, spec.lattice(), phi_a.values(), n, seed, layer.k, settings)
}

/// Draw `n` fields from the uppermost marginal `e^{−S}/Z₀`.
pub fn top_layer_sample(spec: &CascadeSpec, n: usize, seed: u64, settings: &SamplerSettings) -> Result<SampleBatch> {
    bare_sample(&spec.params, n, seed, settings).map(|mut b| {
        b.layer_k = spec.k_grid[0];
        b
    })
}

/// Draw from `e^{−S}/Z₀` without a flow.
pub fn bare_sample(params: &BareActionParams, n: usize, seed: u64, settings: &SamplerSettings) -> Result<SampleBatch> {
    let d = LayerDensity::new(params, &vec![0.0; params.lattice.sites()], None)?;
    draw(&d, &params.lattice, &vec![0.0; params.lattice.sites()], n, seed, f64::INFINITY, settings)
}

/// `k ∂_kΠ_k[φ_a]` at every layer.
fn flow_integrand(phi_a: &FieldConfig, spec: &CascadeSpec) -> Result<Vec<f64>> {
    let reg = spec.regulator(spec.k_grid[0]);
    spec.trajectory
        .states
        .iter()
        .map(|s| Ok(s.k * wetterich_rhs(s, &reg)?.value(phi_a.values())?))
        .collect()
}

fn trapezoid_log(ks: &[f64], f: &[f64], stride: usize) -> f64 {
    let idx: Vec<usize> = (0..ks.len()).step_by(stride).collect();
    idx.windows(2)
        .map(|w| 0.5 * (f[w[0]] + f[w[1]]) * (ks[w[1]] / ks[w[0]]).ln())
        .sum()
}

/// `Σ_layers −(∂Π_k/∂k) Δk ≈ Π_{k_min}[φ_a] − Π_Λ[φ_a]`, accumulated with
/// the trapezoid rule in `ln k` over the layer scales.
pub fn cascade_marginal_log_ratio(phi_a: &FieldConfig, spec: &CascadeSpec) -> Result<f64> {
    check_field(phi_a, spec)?;
    if spec.layers() < 2 {
        return Ok(0.0);
    }
    let f = flow_integrand(phi_a, spec)?;
    Ok(trapezoid_log(&spec.k_grid, &f, 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TelescopeReport {
    #[serde(serialize_with = "serialize_f64")]
    pub telescoped: f64,
    /// `Π_{k_min}[φ_a] − Π_Λ[φ_a]` from the integrated states.
    #[serde(serialize_with = "serialize_f64")]
    pub endpoint_difference: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub residual: f64,
    /// Richardson estimate from the sum over every other layer.
    #[serde(serialize_with = "serialize_f64")]
    pub quadrature_error: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub ode_error: f64,
}

pub fn telescope_report(phi_a: &FieldConfig, spec: &CascadeSpec) -> Result<TelescopeReport> {
    let telescoped = cascade_marginal_log_ratio(phi_a, spec)?;
    let top = spec.layer(0).functional.value(phi_a.values())?;
    let bottom = spec.layer(spec.layers() - 1).functional.value(phi_a.values())?;
    let quadrature_error = if spec.layers() >= 3 && (spec.layers() - 1) % 2 == 0 {
        let f = flow_integrand(phi_a, spec)?;
        (telescoped - trapezoid_log(&spec.k_grid, &f, 2)).abs() / 3.0
    } else {
        0.0
    };
    Ok(TelescopeReport {
        telescoped,
        endpoint_difference: bottom - top,
        residual: telescoped - (bottom - top),
        quadrature_error,
        ode_error: spec.trajectory.error_estimate,
    })
}

fn oracle_log_z0(spec: &CascadeSpec) -> Result<f64> {
    let sites = spec.lattice().sites();
    if sites > ORACLE_SITES {
        return Err(Error::ScaleExceeded {
            sites,
            limit: ORACLE_SITES,
        });
    }
    log_partition_quadrature(&spec.params, &SourceField::zeros(spec.lattice()))
}

/// Both sides of `P_v[φ] = e^{−Π[φ]} / ∫Dφ e^{−S}` in log form, with
/// `P_v = e^{−S}/Z₀` and `Π` the flow endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InputDistributionCheck {
    #[serde(serialize_with = "serialize_f64")]
    pub lhs: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub rhs: f64,
    /// `rhs − lhs`; equals `ln Z₀` for a free theory.
    #[serde(serialize_with = "serialize_f64")]
    pub residual: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub log_z0: f64,
}

pub fn input_distribution_log(phi: &FieldConfig, spec: &CascadeSpec) -> Result<InputDistributionCheck> {
    check_field(phi, spec)?;
    let log_z0 = oracle_log_z0(spec)?;
    let s = spec.params.action_of(phi.values());
    let pi = spec.trajectory.endpoint().functional.value(phi.values())?;
    let lhs = -s - log_z0;
    let rhs = -pi - log_z0;
    Ok(InputDistributionCheck {
        lhs,
        rhs,
        residual: rhs - lhs,
        log_z0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalizationAudit {
    /// `∫ P_v[φ] e^{Π[φ] − S[φ]}`.
    #[serde(serialize_with = "serialize_f64")]
    pub bayes_integral: f64,
    /// `∫ e^{−Π[φ]} / ∫ e^{−S[φ]}`.
    #[serde(serialize_with = "serialize_f64")]
    pub effective_normalization: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub log_z0: f64,
}

struct ClosureDensity<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for ClosureDensity<F> {
    fn n_vars(&self) -> usize {
        self.n
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

fn log_integral<F: Fn(&[f64]) -> Result<f64> + Sync>(spec: &CascadeSpec, f: F) -> Result<f64> {
    let sites = spec.lattice().sites();
    match &spec.trajectory.endpoint().functional {
        Functional::Quadratic(_) => {
            let d = ClosureDensity {
                n: sites,
                f: |x: &[f64]| f(x).unwrap_or(f64::NEG_INFINITY),
            };
            let frame = quadrature::laplace_frame(&d, None)?;
            let none = |_: &[f64], _: &mut [f64]| {};
            Ok(quadrature::integrate(&d, &frame, 0, &none, &QuadratureSettings::default())?.log_z)
        }
        Functional::Grid(g) => {
            // Tensor Simpson on the potential's own nodes.
            let nodes = &g.phi_nodes;
            let h = g.spacing();
            let m = nodes.len();
            let w1: Vec<f64> = (0..m)
                .map(|i| {
                    let base = if i == 0 || i == m - 1 {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    base * h / 3.0
                })
                .collect();
            let mut idx = vec![0usize; sites];
            let mut logs = Vec::new();
            loop {
                let x: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
                let lw: f64 = idx.iter().map(|&i| w1[i].ln()).sum();
                logs.push(f(&x)? + lw);
                let mut d = 0;
                loop {
                    if d == sites {
                        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        return Ok(max + logs.iter().map(|v| (v - max).exp()).sum::<f64>().ln());
                    }
                    idx[d] += 1;
                    if idx[d] < m {
                        break;
                    }
                    idx[d] = 0;
                    d += 1;
                }
            }
        }
    }
}

/// Probability audit of the top marginal against the flow endpoint.
pub fn normalization_audit(spec: &CascadeSpec) -> Result<NormalizationAudit> {
    let log_z0 = oracle_log_z0(spec)?;
    let pi = &spec.trajectory.endpoint().functional;
    let params = &spec.params;
    let bayes = log_integral(spec, |x| Ok(-2.0 * params.action_of(x) + pi.value(x)? - log_z0))?;
    let eff = log_integral(spec, |x| Ok(-pi.value(x)?))?;
    Ok(NormalizationAudit {
        bayes_integral: bayes.exp(),
        effective_normalization: (eff - log_z0).exp(),
        log_z0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{initial_state, integrate_flow};
    use crate::regulator::regulator_term;
    use crate::FlowSettings;
    use approx::assert_abs_diff_eq;

    fn cascade(params: BareActionParams, settings: FlowSettings) -> CascadeSpec {
        let traj = integrate_flow(&params, initial_state(&params, &settings).unwrap(), &settings).unwrap();
        CascadeSpec::new(params, traj).unwrap()
    }

    fn gaussian_cascade(m2: f64) -> CascadeSpec {
        let p = BareActionParams::zero_dimensional(m2, 0.0).unwrap();
        let s = FlowSettings::for_params(&p);
        cascade(p, FlowSettings { uv_scale: 100.0, ..s })
    }

    #[test]
    fn regulator_matrix_reproduces_spectral_form() {
        let l = LatticeSpec::new(2, 3, 0.7).unwrap();
        let reg = RegulatorSpec::new(RegulatorFamily::Exponential, 1.3, l).unwrap();
        let phi: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let pa: Vec<f64> = (0..9).map(|i| (i as f64 * 1.1).cos()).collect();
        let m = regulator_matrix(&reg);
        let v = DVector::from_column_slice(&phi);
        let a = DVector::from_column_slice(&pa);
        let bilinear = a.dot(&(&m * &v)) - 0.5 * v.dot(&(&m * &v));
        let spectral = regulator_term(
            &FieldConfig::new(l, phi).unwrap(),
            &FieldConfig::new(l, pa).unwrap(),
            &reg,
        )
        .unwrap();
        assert_abs_diff_eq!(bilinear, spectral, epsilon = 1e-12);
    }

    #[test]
    fn layer_density_is_centred_on_phi_a() {
        let spec = gaussian_cascade(1.0);
        let layer = spec.layer(200);
        let l = *spec.lattice();
        let pa = FieldConfig::constant(l, 0.7);
        let at = |x: f64| layer_log_density(&FieldConfig::constant(l, x), &pa, layer, &spec).unwrap();
        assert!(at(0.7) > at(0.7 + 1e-3));
        assert!(at(0.7) > at(0.7 - 1e-3));
        // Precision m² + k².
        let h = 1e-3;
        let curv = -(at(0.7 + h) - 2.0 * at(0.7) + at(0.7 - h)) / (h * h);
        assert_abs_diff_eq!(curv, 1.0 + layer.k * layer.k, epsilon = 1e-4 * (1.0 + layer.k * layer.k));
    }

    #[test]
    fn mean_field_identity() {
        let spec = gaussian_cascade(1.0);
        let l = *spec.lattice();
        for (i, phi) in [(0, 0.3), (150, -0.8), (400, 1.2)] {
            let layer = spec.layer(i);
            let pa = FieldConfig::constant(l, phi);
            let lhs = normalized_layer_log_density(&pa, &pa, layer, &spec).unwrap();
            let rhs = -spec.params.action_of(pa.values()) + layer.functional.value(pa.values()).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6);
        }
    }

    #[test]
    fn vanishing_regulator_layer_is_bare() {
        let p = BareActionParams::zero_dimensional(1.0, 0.5).unwrap();
        let settings = FlowSettings {
            representation: crate::Representation::Grid,
            ..FlowSettings::for_params(&p)
        };
        let spec = cascade(p, settings);
        let l = *spec.lattice();
        let layer = FlowState {
            k: 0.0,
            ..spec.trajectory.endpoint().clone()
        };
        let zero = FieldConfig::zeros(l);
        let a = layer_log_density(&FieldConfig::constant(l, 0.4), &zero, &layer, &spec).unwrap();
        let b = layer_log_density(&FieldConfig::constant(l, -1.1), &zero, &layer, &spec).unwrap();
        let sa = p.action_of(&[0.4]);
        let sb = p.action_of(&[-1.1]);
        assert_abs_diff_eq!(a - b, sb - sa, epsilon = 1e-12);
    }

    #[test]
    fn inverse_cdf_moments_and_replay() {
        let p = BareActionParams::zero_dimensional(1.0, 0.0).unwrap();
        let s = SamplerSettings::default();
        let b = bare_sample(&p, 100_000, 11, &s).unwrap();
        let n = b.len() as f64;
        assert!(b.mean.abs() < 3.0 / n.sqrt());
        assert!((b.variance - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
        assert_eq!(b, bare_sample(&p, 100_000, 11, &s).unwrap());
        assert_ne!(b.data, bare_sample(&p, 100_000, 12, &s).unwrap().data);
    }

    #[test]
    fn conditioned_variance_shrinks_with_cutoff() {
        let spec = gaussian_cascade(1.0);
        let l = *spec.lattice();
        let zero = FieldConfig::zeros(l);
        let mut last = f64::INFINITY;
        for i in [300, 150, 0] {
            let layer = spec.layer(i);
            let b = sample_layer(&zero, layer, &spec, 50_000, 3, &SamplerSettings::default()).unwrap();
            let expected = 1.0 / (1.0 + layer.k * layer.k);
            assert!((b.variance / expected - 1.0).abs() < 4.0 * (2.0 / 50_000f64).sqrt());
            assert!(b.variance < last);
            last = b.variance;
        }
    }

    #[test]
    fn metropolis_detailed_balance_and_chains() {
        let l = LatticeSpec::new(1, 4, 1.0).unwrap();
        let p = BareActionParams::new(l, 0.5, 0.8, true).unwrap();
        let settings = SamplerSettings {
            burn_in: 20,
            thinning: 2,
            chains: 3,
            record_proposals: true,
            ..SamplerSettings::default()
        };
        let b = bare_sample(&p, 30, 5, &settings).unwrap();
        let d = LayerDensity::new(&p, &[0.0; 4], None).unwrap();
        // Replay each chain from its log: every recorded delta must match
        // the full density difference and every decision the Metropolis rule.
        for c in 0..3 {
            let mut phi = vec![0.0; 4];
            for r in b.proposals.iter().filter(|r| r.chain == c) {
                assert_eq!(phi[r.site], r.old);
                let mut trial = phi.clone();
                trial[r.site] = r.new;
                let full = d.log_density(&trial) - d.log_density(&phi);
                assert!((full - r.delta_log_density).abs() <= 1e-12 * (1.0 + full.abs()));
                assert_eq!(r.accepted, r.uniform.ln() < full.min(f64::MAX));
                if r.accepted {
                    phi = trial;
                }
            }
        }
        // Chains merged in order equal independent single-chain runs.
        let single = |c: u64| {
            bare_sample(
                &p,
                10,
                5 + c,
                &SamplerSettings {
                    chains: 1,
                    record_proposals: false,
                    ..settings
                },
            )
            .unwrap()
        };
        let merged: Vec<f64> = (0..3).flat_map(|c| single(c).data).collect();
        assert_eq!(merged, b.data);
    }

    #[test]
    fn metropolis_moments_on_lattice() {
        let l = LatticeSpec::new(1, 2, 1.0).unwrap();
        let p = BareActionParams::new(l, 1.0, 1.0, true).unwrap();
        let b = bare_sample(&p, 40_000, 9, &SamplerSettings::default()).unwrap();
        let obs = |x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0];
        let exact = crate::action::sourced_integral(&p, &SourceField::zeros(&l), 1, &obs, &QuadratureSettings::default())
            .unwrap()
            .expectations[0];
        let sq: Vec<f64> = b.iter().map(|c| c[0] * c[0]).collect();
        let mean = sq.iter().sum::<f64>() / sq.len() as f64;
        // Thinned chains are nearly independent; allow generous slack.
        let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / sq.len() as f64;
        assert!((mean - exact).abs() < 5.0 * (var / sq.len() as f64).sqrt(), "{mean} vs {exact}");
        assert!(b.acceptance_rate > 0.2 && b.acceptance_rate < 0.9);
    }

    #[test]
    fn telescope_matches_endpoint() {
        let spec = gaussian_cascade(1.0);
        for phi in [0.0, 1.0, -1.0] {
            let r = telescope_report(&FieldConfig::constant(*spec.lattice(), phi), &spec).unwrap();
            assert!(r.residual.abs() < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn single_layer_telescope_is_empty() {
        let p = BareActionParams::zero_dimensional(1.0, 0.0).unwrap();
        let s = FlowSettings {
            uv_scale: 50.0,
            k_min: 50.0,
            ..FlowSettings::for_params(&p)
        };
        let spec = cascade(p, s);
        assert_eq!(cascade_marginal_log_ratio(&FieldConfig::constant(*spec.lattice(), 1.0), &spec).unwrap(), 0.0);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let spec = gaussian_cascade(1.0);
        let mut grid = spec.k_grid.clone();
        grid[3] *= 1.01;
        assert!(matches!(
            CascadeSpec::with_k_grid(spec.params, grid, spec.trajectory.clone()),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn input_distribution_and_normalization() {
        let tau = 2.0 * std::f64::consts::PI;
        let spec = gaussian_cascade(tau);
        let l = *spec.lattice();
        for phi in [0.0, 0.5] {
            let r = input_distribution_log(&FieldConfig::constant(l, phi), &spec).unwrap();
            assert!(r.residual.abs() < 1e-6, "{r:?}");
        }
        let a = normalization_audit(&spec).unwrap();
        assert_abs_diff_eq!(a.bayes_integral, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(a.effective_normalization, 1.0, epsilon = 1e-6);

        let spec = gaussian_cascade(1.0);
        for phi in [-3.0, 0.0, 2.0] {
            let r = input_distribution_log(&FieldConfig::constant(l, phi), &spec).unwrap();
            assert_abs_diff_eq!(r.residual, 0.5 * tau.ln(), epsilon = 1e-6);
        }
    }
}
