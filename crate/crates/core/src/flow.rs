//! Effective average functional `Π_k` and its Wetterich flow
//! `∂_k Π_k = ½ Tr[∂_k R_k (Π_k^{(2)} + R_k)^{-1}]`.
//!
//! Two representations are supported:
//!
//! * [`QuadraticFunctional`]: exact for free theories; only the
//!   field-independent constant flows.
//! * [`GridPotential`]: local potential approximation on a uniform field
//!   grid. Exact on the single-site lattice, approximate otherwise.
//!
//! The flow is integrated downward in `t = ln(k/Λ)` with classical RK4 and
//! step-doubling error control on a logarithmic k-grid.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::action::{log_partition_quadrature, sourced_integral, BareActionParams, SourceField};
use crate::export::fmt_num;
use crate::lattice::{momentum_grid, FieldConfig, LatticeSpec};
use crate::quadrature::QuadratureSettings;
use crate::regulator::{RegulatorFamily, RegulatorSpec};
use crate::{Error, Result};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// `Π[φ] = ½ a^d φᵀKφ + a^d lᵀφ + c` with `K` the kernel per unit measure.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFunctional {
    pub lattice: LatticeSpec,
    pub kernel: DMatrix<f64>,
    pub linear: Vec<f64>,
    pub constant: f64,
}

impl QuadraticFunctional {
    pub fn new(lattice: LatticeSpec, kernel: DMatrix<f64>, linear: Vec<f64>, constant: f64) -> Result<Self> {
        let n = lattice.sites();
        if kernel.nrows() != n || kernel.ncols() != n || linear.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: kernel.nrows(),
            });
        }
        let asym = (&kernel - kernel.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::InvalidParameter(format!("kernel not symmetric (defect {asym:e})")));
        }
        Ok(Self {
            lattice,
            kernel,
            linear,
            constant,
        })
    }

    /// Bare free action as a quadratic functional (constant zero).
    pub fn from_action(params: &BareActionParams) -> Result<Self> {
        if !params.is_gaussian() {
            return Err(Error::InvalidParameter("quadratic representation requires quartic = 0".into()));
        }
        let zero = vec![0.0; params.lattice.sites()];
        let kernel = params.hessian_of(&zero) / params.lattice.measure();
        Self::new(params.lattice, kernel, zero, 0.0)
    }

    pub fn value(&self, phi: &[f64]) -> f64 {
        let v = DVector::from_column_slice(phi);
        let m = self.lattice.measure();
        let quad = 0.5 * m * v.dot(&(&self.kernel * &v));
        let lin: f64 = m * self.linear.iter().zip(phi).map(|(l, p)| l * p).sum::<f64>();
        quad + lin + self.constant
    }

    /// Functional derivative `δΠ/δφ(x) = (Kφ)(x) + l(x)`.
    pub fn derivative(&self, phi: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(phi);
        let kv = &self.kernel * v;
        kv.iter().zip(&self.linear).map(|(a, b)| a + b).collect()
    }

    /// Kernel in the unitary plane-wave basis, `F K F†`.
    pub fn momentum_kernel(&self) -> DMatrix<Complex64> {
        let l = &self.lattice;
        let n = l.sites();
        let norm = 1.0 / (n as f64).sqrt();
        let grid = momentum_grid(l);
        let f = DMatrix::from_fn(n, n, |p, x| Complex64::from_polar(norm, -grid[p].phase(l, x)));
        let k = self.kernel.map(|v| Complex64::new(v, 0.0));
        &f * k * f.adjoint()
    }

    pub fn zero_mode_curvature(&self) -> f64 {
        let n = self.lattice.sites() as f64;
        self.kernel.sum() / n
    }
}

/// Local potential `U_k(φ)` tabulated on a uniform grid symmetric about 0
/// with an odd node count. `u_values` hold the field-dependent part
/// (`u(0) = 0` for flows started from an even action) and `constant` the
/// field-independent part, both per unit volume.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPotential {
    pub lattice: LatticeSpec,
    pub kinetic: bool,
    pub phi_nodes: Vec<f64>,
    pub u_values: Vec<f64>,
    pub constant: f64,
}

impl GridPotential {
    pub fn new(
        lattice: LatticeSpec,
        kinetic: bool,
        phi_nodes: Vec<f64>,
        u_values: Vec<f64>,
        constant: f64,
    ) -> Result<Self> {
        let n = phi_nodes.len();
        if n < 5 || n % 2 == 0 {
            return Err(Error::InvalidParameter(format!("grid needs an odd node count ≥ 5, got {n}")));
        }
        if u_values.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: u_values.len(),
            });
        }
        let h = (phi_nodes[n - 1] - phi_nodes[0]) / (n - 1) as f64;
        if !(h > 0.0) {
            return Err(Error::InvalidParameter("grid must be strictly increasing".into()));
        }
        for (i, x) in phi_nodes.iter().enumerate() {
            let expected = phi_nodes[0] + i as f64 * h;
            if (x - expected).abs() > 1e-9 * h {
                return Err(Error::InvalidParameter("grid must be uniform".into()));
            }
            if (x + phi_nodes[n - 1 - i]).abs() > 1e-9 * h {
                return Err(Error::InvalidParameter("grid must be symmetric about 0".into()));
            }
        }
        if let Some(i) = u_values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            lattice,
            kinetic,
            phi_nodes,
            u_values,
            constant,
        })
    }

    /// `n` uniform nodes on `[-half_width, half_width]`.
    pub fn uniform_nodes(n: usize, half_width: f64) -> Vec<f64> {
        (0..n)
            .map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Bare potential on the grid.
    pub fn from_action(params: &BareActionParams, nodes: usize, half_width: f64) -> Result<Self> {
        let phi = Self::uniform_nodes(nodes, half_width);
        let u = phi.iter().map(|&p| params.potential(p)).collect();
        Self::new(params.lattice, params.kinetic, phi, u, 0.0)
    }

    pub fn spacing(&self) -> f64 {
        self.phi_nodes[1] - self.phi_nodes[0]
    }

    pub fn center_index(&self) -> usize {
        self.phi_nodes.len() / 2
    }

    pub fn range(&self) -> (f64, f64) {
        (self.phi_nodes[0], *self.phi_nodes.last().unwrap())
    }

    /// Centered second differences; edge nodes reuse the one-sided
    /// three-point stencil (equal to the neighbouring interior value).
    pub fn curvature_nodes(&self) -> Vec<f64> {
        let u = &self.u_values;
        let n = u.len();
        let h2 = self.spacing() * self.spacing();
        let mut c = vec![0.0; n];
        for i in 1..n - 1 {
            c[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / h2;
        }
        c[0] = (u[0] - 2.0 * u[1] + u[2]) / h2;
        c[n - 1] = (u[n - 1] - 2.0 * u[n - 2] + u[n - 3]) / h2;
        c
    }

    /// Cell index and offset inside it, in units of `h`.
    fn locate(&self, phi: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.range();
        let h = self.spacing();
        if !(phi >= lo - 1e-12 * h && phi <= hi + 1e-12 * h) {
            return Err(Error::OutsideGrid { value: phi, lo, hi });
        }
        let n = self.phi_nodes.len();
        let s = ((phi - lo) / h).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).min(n - 2);
        Ok((j, s - j as f64))
    }

    /// Nodal slope: fourth-order centred difference in the interior,
    /// cubic-exact one-sided stencils next to the edges.
    fn slope_node(&self, i: usize) -> f64 {
        let u = &self.u_values;
        let n = u.len();
        let h = self.spacing();
        match i {
            0 => (-11.0 * u[0] + 18.0 * u[1] - 9.0 * u[2] + 2.0 * u[3]) / (6.0 * h),
            1 => (-2.0 * u[0] - 3.0 * u[1] + 6.0 * u[2] - u[3]) / (6.0 * h),
            _ if i == n - 2 => (2.0 * u[n - 1] + 3.0 * u[n - 2] - 6.0 * u[n - 3] + u[n - 4]) / (6.0 * h),
            _ if i == n - 1 => (11.0 * u[n - 1] - 18.0 * u[n - 2] + 9.0 * u[n - 3] - 2.0 * u[n - 4]) / (6.0 * h),
            _ => (u[i - 2] - 8.0 * u[i - 1] + 8.0 * u[i + 1] - u[i + 2]) / (12.0 * h),
        }
    }

    fn curvature_node(&self, i: usize) -> f64 {
        let u = &self.u_values;
        let n = u.len();
        let c = i.clamp(1, n - 2);
        (u[c + 1] - 2.0 * u[c] + u[c - 1]) / (self.spacing() * self.spacing())
    }

    /// Field-dependent part `u(φ)` by cubic Hermite interpolation.
    pub fn u_at(&self, phi: f64) -> Result<f64> {
        let (j, t) = self.locate(phi)?;
        let h = self.spacing();
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        Ok(h00 * self.u_values[j]
            + h10 * h * self.slope_node(j)
            + h01 * self.u_values[j + 1]
            + h11 * h * self.slope_node(j + 1))
    }

    /// Full potential `U(φ) = u(φ) + constant`.
    pub fn value_at(&self, phi: f64) -> Result<f64> {
        Ok(self.u_at(phi)? + self.constant)
    }

    /// `U'(φ)` from the derivative of the Hermite interpolant.
    pub fn slope_at(&self, phi: f64) -> Result<f64> {
        let (j, t) = self.locate(phi)?;
        let h = self.spacing();
        let t2 = t * t;
        let d00 = 6.0 * t2 - 6.0 * t;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = -6.0 * t2 + 6.0 * t;
        let d11 = 3.0 * t2 - 2.0 * t;
        Ok((d00 * self.u_values[j] + d01 * self.u_values[j + 1]) / h
            + d10 * self.slope_node(j)
            + d11 * self.slope_node(j + 1))
    }

    /// `U''(φ)`: nodal second differences, linearly interpolated.
    pub fn curvature_at(&self, phi: f64) -> Result<f64> {
        let (j, t) = self.locate(phi)?;
        Ok(self.curvature_node(j) * (1.0 - t) + self.curvature_node(j + 1) * t)
    }

    /// `Π[φ] = a^d Σ_x [½(∇φ)² + U(φ(x))]`.
    pub fn functional_value(&self, phi: &[f64]) -> Result<f64> {
        let l = &self.lattice;
        let inv_a2 = 1.0 / (l.spacing() * l.spacing());
        let mut s = 0.0;
        for (x, &v) in phi.iter().enumerate() {
            s += self.value_at(v)?;
            if self.kinetic {
                for mu in 0..l.dim() {
                    let d = phi[l.neighbor(x, mu, true)] - v;
                    s += 0.5 * d * d * inv_a2;
                }
            }
        }
        Ok(s * l.measure())
    }

    /// `δΠ/δφ(x) = −Δφ(x) + U'(φ(x))`.
    pub fn functional_derivative(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let l = &self.lattice;
        let inv_a2 = 1.0 / (l.spacing() * l.spacing());
        phi.iter()
            .enumerate()
            .map(|(x, &v)| {
                let mut g = self.slope_at(v)?;
                if self.kinetic {
                    for mu in 0..l.dim() {
                        g += (2.0 * v - phi[l.neighbor(x, mu, true)] - phi[l.neighbor(x, mu, false)]) * inv_a2;
                    }
                }
                Ok(g)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    Quadratic(QuadraticFunctional),
    Grid(GridPotential),
}

impl Functional {
    pub fn lattice(&self) -> &LatticeSpec {
        match self {
            Functional::Quadratic(q) => &q.lattice,
            Functional::Grid(g) => &g.lattice,
        }
    }

    /// `Π[φ]` for a full field configuration.
    pub fn value(&self, phi: &[f64]) -> Result<f64> {
        match self {
            Functional::Quadratic(q) => Ok(q.value(phi)),
            Functional::Grid(g) => g.functional_value(phi),
        }
    }

    /// `δΠ/δφ(x)` for each site.
    pub fn derivative(&self, phi: &[f64]) -> Result<Vec<f64>> {
        match self {
            Functional::Quadratic(q) => Ok(q.derivative(phi)),
            Functional::Grid(g) => g.functional_derivative(phi),
        }
    }

    /// Curvature at vanishing field in the zero-momentum channel.
    pub fn curvature_at_zero(&self) -> f64 {
        match self {
            Functional::Quadratic(q) => q.zero_mode_curvature(),
            Functional::Grid(g) => g.curvature_nodes()[g.center_index()],
        }
    }

    /// The field-independent part.
    pub fn constant(&self) -> f64 {
        match self {
            Functional::Quadratic(q) => q.constant,
            Functional::Grid(g) => g.constant,
        }
    }

    fn to_vector(&self) -> Vec<f64> {
        match self {
            Functional::Quadratic(q) => vec![q.constant],
            Functional::Grid(g) => {
                let mut v = g.u_values.clone();
                v.push(g.constant);
                v
            }
        }
    }

    fn with_vector(&self, v: &[f64]) -> Functional {
        match self {
            Functional::Quadratic(q) => Functional::Quadratic(QuadraticFunctional {
                constant: v[0],
                ..q.clone()
            }),
            Functional::Grid(g) => {
                let n = g.u_values.len();
                Functional::Grid(GridPotential {
                    u_values: v[..n].to_vec(),
                    constant: v[n],
                    ..g.clone()
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub k: f64,
    pub functional: Functional,
}

/// Second functional derivative of `Π_k` at `φ_a`.
///
/// Quadratic: the field-independent matrix `a^d K`. Grid: the scalar
/// `U_k''(φ_a)` as a 1×1 matrix, which requires a constant `φ_a`.
pub fn functional_hessian(state: &FlowState, phi_a: &FieldConfig) -> Result<DMatrix<f64>> {
    match &state.functional {
        Functional::Quadratic(q) => Ok(&q.kernel * q.lattice.measure()),
        Functional::Grid(g) => {
            let v = phi_a.values();
            let c = v[0];
            if v.iter().any(|x| (x - c).abs() > 1e-12 * (1.0 + c.abs())) {
                return Err(Error::InvalidParameter(
                    "the local potential truncation needs a constant mean field".into(),
                ));
            }
            Ok(DMatrix::from_element(1, 1, g.curvature_at(c)?))
        }
    }
}

/// Right-hand side of the flow equation in the representation of `state`.
/// The returned functional holds `∂_k` of every component.
pub fn wetterich_rhs(state: &FlowState, regulator: &RegulatorSpec) -> Result<Functional> {
    let reg = regulator.with_scale(state.k);
    let lattice = state.functional.lattice();
    let r = reg.spectrum();
    let dr = reg.k_derivative_spectrum();
    match &state.functional {
        Functional::Quadratic(q) => {
            let kt = q.momentum_kernel();
            let n = kt.nrows();
            let mut m = kt.clone();
            for p in 0..n {
                m[(p, p)] += Complex64::new(r[p], 0.0);
                if m[(p, p)].re <= 0.0 {
                    return Err(Error::FlowBreakdown {
                        k: state.k,
                        detail: format!("non-positive regulated curvature in mode {p}"),
                    });
                }
            }
            let chol = m.cholesky().ok_or_else(|| Error::FlowBreakdown {
                k: state.k,
                detail: "regulated kernel not positive definite".into(),
            })?;
            let inv = chol.inverse();
            let trace: f64 = (0..n).map(|p| dr[p] * inv[(p, p)].re).sum();
            Ok(Functional::Quadratic(QuadraticFunctional {
                kernel: DMatrix::zeros(n, n),
                linear: vec![0.0; n],
                constant: 0.5 * trace,
                ..q.clone()
            }))
        }
        Functional::Grid(g) => {
            let grid = momentum_grid(lattice);
            let p_sq: Vec<f64> = grid
                .iter()
                .map(|p| if g.kinetic { p.hat_sq(lattice) } else { 0.0 })
                .collect();
            let volume = lattice.volume();
            let curv = g.curvature_nodes();
            let mut rhs = Vec::with_capacity(curv.len());
            for (i, c) in curv.iter().enumerate() {
                let mut s = 0.0;
                for p in 0..grid.len() {
                    if dr[p] == 0.0 {
                        continue;
                    }
                    let den = p_sq[p] + c + r[p];
                    if !(den > 0.0) {
                        return Err(Error::FlowBreakdown {
                            k: state.k,
                            detail: format!("U'' + R_k = {den:e} at node {i} (φ = {})", g.phi_nodes[i]),
                        });
                    }
                    s += dr[p] / den;
                }
                rhs.push(0.5 * s / volume);
            }
            let center = rhs[g.center_index()];
            // The kinetic term does not flow in this truncation.
            Ok(Functional::Grid(GridPotential {
                kinetic: false,
                u_values: rhs.iter().map(|v| v - center).collect(),
                constant: center,
                ..g.clone()
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Quadratic for free theories, grid otherwise.
    #[default]
    Auto,
    Quadratic,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSettings {
    pub family: RegulatorFamily,
    pub uv_scale: f64,
    pub k_min: f64,
    pub steps: usize,
    /// Local error tolerance per accepted RK4 step (max norm).
    pub tolerance: f64,
    pub grid_nodes: usize,
    /// Defaults to six field widths `6 (m² + λ)^{-1/2}`.
    pub grid_half_width: Option<f64>,
    pub representation: Representation,
}

impl FlowSettings {
    /// Defaults scaled to the theory: `Λ = 100 · mass scale`.
    pub fn for_params(params: &BareActionParams) -> Self {
        Self {
            family: RegulatorFamily::Litim,
            uv_scale: 100.0 * params.mass_scale_sq().sqrt(),
            k_min: 1e-3,
            steps: 400,
            tolerance: 1e-10,
            grid_nodes: 129,
            grid_half_width: None,
            representation: Representation::Auto,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.uv_scale > 0.0 && self.uv_scale.is_finite()) {
            return Err(Error::InvalidParameter("uv_scale must be positive".into()));
        }
        if !(self.k_min > 0.0 && self.k_min <= self.uv_scale) {
            return Err(Error::InvalidParameter("k_min must lie in (0, uv_scale]".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter("tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Logarithmic grid from `Λ` down to `k_min`, `steps + 1` points.
    pub fn k_grid(&self) -> Vec<f64> {
        let ratio = self.k_min / self.uv_scale;
        (0..=self.steps)
            .map(|i| {
                if i == self.steps {
                    self.k_min
                } else {
                    self.uv_scale * ratio.powf(i as f64 / self.steps as f64)
                }
            })
            .collect()
    }
}

/// `Π_Λ = S + c_Λ` with the one-loop normalization
/// `c_Λ = ½ ln det[a^d (S^{(2)}(0) + R_Λ) / 2π]`, which makes the Gaussian
/// constant at `k → 0` equal `−ln Z[0]`.
pub fn initial_state(params: &BareActionParams, settings: &FlowSettings) -> Result<FlowState> {
    settings.validate()?;
    let l = params.lattice;
    let reg = RegulatorSpec::new(settings.family, settings.uv_scale, l)?;
    let r = reg.spectrum();
    let use_quadratic = match settings.representation {
        Representation::Auto => params.is_gaussian(),
        Representation::Quadratic => true,
        Representation::Grid => false,
    };
    let log_norm = |kernel_eigs: &[f64]| -> Result<f64> {
        let mut s = 0.0;
        for (k, rp) in kernel_eigs.iter().zip(&r) {
            let v = l.measure() * (k + rp) / TWO_PI;
            if !(v > 0.0) {
                return Err(Error::FlowBreakdown {
                    k: settings.uv_scale,
                    detail: "initial regulated curvature not positive".into(),
                });
            }
            s += v.ln();
        }
        Ok(0.5 * s)
    };
    let eigs: Vec<f64> = momentum_grid(&l).iter().map(|p| params.kernel_eigenvalue(p)).collect();
    let functional = if use_quadratic {
        let mut q = QuadraticFunctional::from_action(params)?;
        let kt = q.momentum_kernel();
        let diag: Vec<f64> = (0..kt.nrows()).map(|p| kt[(p, p)].re).collect();
        q.constant = log_norm(&diag)?;
        Functional::Quadratic(q)
    } else {
        let half = settings.grid_half_width.unwrap_or(6.0 * params.field_scale());
        let mut g = GridPotential::from_action(params, settings.grid_nodes, half)?;
        g.constant = log_norm(&eigs)? / l.volume();
        Functional::Grid(g)
    };
    Ok(FlowState {
        k: settings.uv_scale,
        functional,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub k: f64,
    pub curvature_at_zero: f64,
    pub constant: f64,
    pub step_error: f64,
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub settings: FlowSettings,
    /// State at every point of the k-grid, starting at `Λ`.
    pub states: Vec<FlowState>,
    pub records: Vec<TrajectoryRecord>,
    /// Sum of accepted local error estimates.
    pub error_estimate: f64,
    /// Whether `Λ² ≥ 100 max(m², λ^{2/3})` held.
    pub validated: bool,
    pub warnings: Vec<String>,
}

impl FlowTrajectory {
    pub fn endpoint(&self) -> &FlowState {
        self.states.last().expect("trajectory always holds the initial state")
    }

    pub fn k_grid(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.k).collect()
    }

    /// CSV with columns `k,U''(0),constant,step_error`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,curvature_at_zero,constant,step_error")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_num(r.k),
                fmt_num(r.curvature_at_zero),
                fmt_num(r.constant),
                fmt_num(r.step_error)
            )?;
        }
        Ok(())
    }
}

fn rk4_step(state: &FlowState, t: f64, h: f64, reg: &RegulatorSpec, uv: f64) -> Result<Vec<f64>> {
    let y0 = state.functional.to_vector();
    let deriv = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let k = uv * t.exp();
        let s = FlowState {
            k,
            functional: state.functional.with_vector(y),
        };
        // dΠ/dt = k ∂_k Π
        Ok(wetterich_rhs(&s, reg)?.to_vector().into_iter().map(|v| k * v).collect())
    };
    let axpy = |y: &[f64], d: &[f64], c: f64| -> Vec<f64> { y.iter().zip(d).map(|(a, b)| a + c * b).collect() };
    let k1 = deriv(t, &y0)?;
    let k2 = deriv(t + 0.5 * h, &axpy(&y0, &k1, 0.5 * h))?;
    let k3 = deriv(t + 0.5 * h, &axpy(&y0, &k2, 0.5 * h))?;
    let k4 = deriv(t + h, &axpy(&y0, &k3, h))?;
    Ok(y0
        .iter()
        .enumerate()
        .map(|(i, y)| y + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrate `Π_k` from `initial` (at `k = Λ`) down the k-grid of `settings`.
pub fn integrate_flow(
    params: &BareActionParams,
    initial: FlowState,
    settings: &FlowSettings,
) -> Result<FlowTrajectory> {
    settings.validate()?;
    if (initial.k - settings.uv_scale).abs() > 1e-12 * settings.uv_scale {
        return Err(Error::InvalidParameter("initial state must sit at k = uv_scale".into()));
    }
    let mut warnings = Vec::new();
    let validated = settings.uv_scale * settings.uv_scale >= 100.0 * params.mass_scale_sq();
    if !validated {
        warnings.push(format!(
            "uv_scale {} below 10 × mass scale {}; the initial condition Π_Λ ≈ S is not justified",
            settings.uv_scale,
            params.mass_scale_sq().sqrt()
        ));
    }
    let reg = RegulatorSpec::new(settings.family, settings.uv_scale, params.lattice)?;
    let uv = settings.uv_scale;
    let ks = settings.k_grid();

    let mut states = vec![initial.clone()];
    let mut records = vec![TrajectoryRecord {
        k: initial.k,
        curvature_at_zero: initial.functional.curvature_at_zero(),
        constant: initial.functional.constant(),
        step_error: 0.0,
    }];
    let mut total_error = 0.0;
    let mut current = initial;
    if settings.k_min == settings.uv_scale {
        return Ok(FlowTrajectory {
            settings: *settings,
            states,
            records,
            error_estimate: 0.0,
            validated,
            warnings,
        });
    }

    let mut hs = ((ks[0] / ks[1]).ln()).abs();
    for w in ks.windows(2) {
        let t_end = (w[1] / uv).ln();
        let mut t = (w[0] / uv).ln();
        let span = (t - t_end).abs();
        let floor = span * 1e-10;
        let mut interval_error = 0.0;
        while t - t_end > 1e-14 * (1.0 + t_end.abs()) {
            let step = hs.min(t - t_end);
            let attempt = (|| -> Result<(Vec<f64>, f64)> {
                let full = rk4_step(&current, t, -step, &reg, uv)?;
                let mid_vec = rk4_step(&current, t, -0.5 * step, &reg, uv)?;
                let mid = FlowState {
                    k: uv * (t - 0.5 * step).exp(),
                    functional: current.functional.with_vector(&mid_vec),
                };
                let half = rk4_step(&mid, t - 0.5 * step, -0.5 * step, &reg, uv)?;
                let err = half
                    .iter()
                    .zip(&full)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
                    / 15.0;
                Ok((half, err))
            })();
            match attempt {
                Ok((y, err)) if err <= settings.tolerance && y.iter().all(|v| v.is_finite()) => {
                    t -= step;
                    current = FlowState {
                        k: uv * t.exp(),
                        functional: current.functional.with_vector(&y),
                    };
                    interval_error += err;
                    if err < settings.tolerance / 32.0 {
                        hs = step * 2.0;
                    } else {
                        hs = step;
                    }
                }
                Ok(_) => {
                    hs = step * 0.5;
                    if hs < floor {
                        return Err(Error::StepControl { k: uv * t.exp() });
                    }
                }
                Err(e) => {
                    hs = step * 0.5;
                    if hs < floor {
                        return Err(e);
                    }
                }
            }
        }
        current.k = w[1];
        total_error += interval_error;
        records.push(TrajectoryRecord {
            k: w[1],
            curvature_at_zero: current.functional.curvature_at_zero(),
            constant: current.functional.constant(),
            step_error: interval_error,
        });
        states.push(current.clone());
    }
    Ok(FlowTrajectory {
        settings: *settings,
        states,
        records,
        error_estimate: total_error,
        validated,
        warnings,
    })
}

/// Exact effective functional `Π[φ] = sup_J [J·a^dΣφ − ln Z[J]]` for
/// constant fields, by Newton iteration on the source with quadrature
/// moments. Returned per unit volume on the given grid.
pub fn effective_action_oracle(params: &BareActionParams, phi_grid: &[f64]) -> Result<GridPotential> {
    let l = params.lattice;
    if l.sites() > 2 {
        return Err(Error::ScaleExceeded {
            sites: l.sites(),
            limit: 2,
        });
    }
    let volume = l.volume();
    let m = l.measure();
    let settings = QuadratureSettings::default();
    let obs = |x: &[f64], out: &mut [f64]| {
        let s: f64 = m * x.iter().sum::<f64>();
        out[0] = s;
        out[1] = s * s;
    };
    let mut values = Vec::with_capacity(phi_grid.len());
    let center = phi_grid.len() / 2;
    // Sweep outward from the centre so each solve starts near its answer.
    let order: Vec<usize> = (center..phi_grid.len()).chain((0..center).rev()).collect();
    let mut solved = vec![(0.0, 0.0); phi_grid.len()];
    for (pos, &i) in order.iter().enumerate() {
        let phi = phi_grid[i];
        let target = volume * phi;
        let mut j = if pos == 0 {
            params.potential_d1(phi)
        } else {
            let prev = if i > center { i - 1 } else { i + 1 };
            solved[prev].0
        };
        let mut converged = false;
        let mut log_z = 0.0;
        for _ in 0..100 {
            let r = sourced_integral(params, &SourceField::uniform(&l, j), 2, &obs, &settings)?;
            let mean = r.expectations[0];
            let var = r.expectations[1] - mean * mean;
            log_z = r.log_z;
            let resid = target - mean;
            if resid.abs() <= 1e-9 * (1.0 + target.abs()) {
                converged = true;
                break;
            }
            if !(var > 0.0) {
                break;
            }
            // Newton on the concave objective J·target − W(J), damped
            // against overshooting into far tails.
            let step = (resid / var).clamp(-10.0, 10.0);
            j += step;
        }
        if !converged {
            return Err(Error::MaximizationNonConvergence { at: phi });
        }
        solved[i] = (j, j * target - log_z);
    }
    values.extend(solved.iter().map(|(_, v)| v / volume));
    let c = values[center];
    GridPotential::new(
        l,
        params.kinetic,
        phi_grid.to_vec(),
        values.iter().map(|v| v - c).collect(),
        c,
    )
}

/// `−ln Z[0]`, the value of the exact effective functional at zero field
/// for even theories.
pub fn effective_action_at_zero(params: &BareActionParams) -> Result<f64> {
    Ok(-log_partition_quadrature(params, &SourceField::zeros(&params.lattice))?)
}
