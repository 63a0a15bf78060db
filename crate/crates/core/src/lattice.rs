//! Periodic hypercubic lattices, real scalar fields on them, and the
//! lattice Fourier transform.
//!
//! Sites are stored with the first axis varying fastest:
//! `site = Σ_μ n_μ N^μ`. Momenta use the same ordering over mode indices,
//! so the zero mode is always index 0.
//!
//! Conventions: the forward transform is `f̃(p) = a^d Σ_x e^{-ip·x} f(x)`
//! and the inverse is `f(x) = (1/V) Σ_p e^{ip·x} f̃(p)` with `V = N^d a^d`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    dim: usize,
    sites_per_dim: usize,
    spacing: f64,
}

impl LatticeSpec {
    /// A `dim`-dimensional periodic lattice with `sites_per_dim` sites along
    /// each axis. `dim = 0` is the single-site model and forces `N = 1`, `a = 1`.
    pub fn new(dim: usize, sites_per_dim: usize, spacing: f64) -> Result<Self> {
        if dim == 0 {
            return Ok(Self::zero_dimensional());
        }
        if sites_per_dim == 0 {
            return Err(Error::InvalidLattice("sites_per_dim must be positive".into()));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidLattice(format!("spacing must be positive, got {spacing}")));
        }
        let sites = (sites_per_dim as u128).checked_pow(dim as u32);
        match sites {
            Some(s) if s <= 1 << 24 => {}
            _ => return Err(Error::InvalidLattice("lattice too large".into())),
        }
        Ok(Self {
            dim,
            sites_per_dim,
            spacing,
        })
    }

    pub fn zero_dimensional() -> Self {
        Self {
            dim: 0,
            sites_per_dim: 1,
            spacing: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sites_per_dim(&self) -> usize {
        self.sites_per_dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn sites(&self) -> usize {
        self.sites_per_dim.pow(self.dim as u32)
    }

    /// Integration weight of one site, `a^d`.
    pub fn measure(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    /// Physical volume `N^d a^d`.
    pub fn volume(&self) -> f64 {
        self.sites() as f64 * self.measure()
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        let n = self.sites_per_dim;
        let mut rest = site;
        (0..self.dim)
            .map(|_| {
                let c = rest % n;
                rest /= n;
                c
            })
            .collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        let n = self.sites_per_dim;
        coords.iter().rev().fold(0, |acc, &c| acc * n + (c % n))
    }

    /// Site reached from `site` by one step along `axis` (`forward` or back).
    pub fn neighbor(&self, site: usize, axis: usize, forward: bool) -> usize {
        let n = self.sites_per_dim;
        let stride = n.pow(axis as u32);
        let c = (site / stride) % n;
        let c_new = if forward { (c + 1) % n } else { (c + n - 1) % n };
        site - c * stride + c_new * stride
    }

    /// Site `x + r` where both are site indices (cyclic addition per axis).
    pub fn add_sites(&self, x: usize, r: usize) -> usize {
        let cx = self.coords(x);
        let cr = self.coords(r);
        let sum: Vec<usize> = cx.iter().zip(&cr).map(|(a, b)| a + b).collect();
        self.index(&sum)
    }

    /// Site `x - y` (cyclic difference per axis).
    pub fn sub_sites(&self, x: usize, y: usize) -> usize {
        let n = self.sites_per_dim;
        let cx = self.coords(x);
        let cy = self.coords(y);
        let diff: Vec<usize> = cx.iter().zip(&cy).map(|(a, b)| a + n - b).collect();
        self.index(&diff)
    }

    pub fn check_momentum(&self, p: &MomentumVector) -> Result<()> {
        if p.modes.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: p.modes.len(),
            });
        }
        if let Some(&mode) = p.modes.iter().find(|&&m| m >= self.sites_per_dim) {
            return Err(Error::OffLattice {
                mode,
                n: self.sites_per_dim,
            });
        }
        Ok(())
    }
}

/// A real scalar value per lattice site. Serves both as a sampled field and
/// as the mean field a layer is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    lattice: LatticeSpec,
    values: Vec<f64>,
}

impl FieldConfig {
    pub fn new(lattice: LatticeSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.sites() {
            return Err(Error::DimensionMismatch {
                expected: lattice.sites(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { lattice, values })
    }

    pub fn zeros(lattice: LatticeSpec) -> Self {
        Self {
            lattice,
            values: vec![0.0; lattice.sites()],
        }
    }

    pub fn constant(lattice: LatticeSpec, c: f64) -> Self {
        Self {
            lattice,
            values: vec![c; lattice.sites()],
        }
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Cyclic translation by the displacement site `r`: `out(x + r) = f(x)`.
    pub fn translated(&self, r: usize) -> Self {
        let mut out = vec![0.0; self.values.len()];
        for (x, &v) in self.values.iter().enumerate() {
            out[self.lattice.add_sites(x, r)] = v;
        }
        Self {
            lattice: self.lattice,
            values: out,
        }
    }
}

/// Dual-lattice momentum labelled by integer mode indices in `[0, N)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MomentumVector {
    modes: Vec<usize>,
}

impl MomentumVector {
    pub fn new(modes: Vec<usize>) -> Self {
        Self { modes }
    }

    pub fn zero(lattice: &LatticeSpec) -> Self {
        Self {
            modes: vec![0; lattice.dim()],
        }
    }

    pub fn modes(&self) -> &[usize] {
        &self.modes
    }

    /// Physical components `2π n_μ / (N a)`.
    pub fn physical(&self, lattice: &LatticeSpec) -> Vec<f64> {
        let n = lattice.sites_per_dim() as f64;
        self.modes
            .iter()
            .map(|&m| 2.0 * PI * m as f64 / (n * lattice.spacing()))
            .collect()
    }

    /// Lattice momentum squared `Σ_μ (2 - 2 cos(2π n_μ/N)) / a²`.
    pub fn hat_sq(&self, lattice: &LatticeSpec) -> f64 {
        let n = lattice.sites_per_dim() as f64;
        let a2 = lattice.spacing() * lattice.spacing();
        self.modes
            .iter()
            .map(|&m| (2.0 - 2.0 * (2.0 * PI * m as f64 / n).cos()) / a2)
            .fold(0.0, |acc, x| acc + x)
    }

    pub fn negated(&self, lattice: &LatticeSpec) -> Self {
        let n = lattice.sites_per_dim();
        Self {
            modes: self.modes.iter().map(|&m| (n - m % n) % n).collect(),
        }
    }

    pub fn added(&self, other: &Self, lattice: &LatticeSpec) -> Self {
        let n = lattice.sites_per_dim();
        Self {
            modes: self
                .modes
                .iter()
                .zip(&other.modes)
                .map(|(a, b)| (a + b) % n)
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.modes.iter().all(|&m| m == 0)
    }

    /// Position of this momentum in [`momentum_grid`] order.
    pub fn index(&self, lattice: &LatticeSpec) -> usize {
        lattice.index(&self.modes)
    }

    /// Phase `p·x` for site `x`.
    pub fn phase(&self, lattice: &LatticeSpec, site: usize) -> f64 {
        let n = lattice.sites_per_dim();
        let coords = lattice.coords(site);
        let dot: usize = self
            .modes
            .iter()
            .zip(&coords)
            .map(|(&m, &c)| (m * c) % n)
            .sum();
        2.0 * PI * (dot % n.max(1)) as f64 / n as f64
    }
}

/// All `N^d` dual-lattice momenta, zero mode first, in site-index order.
pub fn momentum_grid(spec: &LatticeSpec) -> Vec<MomentumVector> {
    (0..spec.sites())
        .map(|i| MomentumVector::new(spec.coords(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Lattice Fourier transform of a complex array indexed by site (forward)
/// or by momentum (inverse).
pub fn dft_complex(spec: &LatticeSpec, data: &[Complex64], direction: Direction) -> Result<Vec<Complex64>> {
    if data.len() != spec.sites() {
        return Err(Error::DimensionMismatch {
            expected: spec.sites(),
            got: data.len(),
        });
    }
    let mut buf = data.to_vec();
    let n = spec.sites_per_dim();
    if spec.dim() > 0 && n > 1 {
        let mut planner = FftPlanner::<f64>::new();
        let fft = match direction {
            Direction::Forward => planner.plan_fft_forward(n),
            Direction::Inverse => planner.plan_fft_inverse(n),
        };
        let total = buf.len();
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for axis in 0..spec.dim() {
            let stride = n.pow(axis as u32);
            for start in 0..total {
                if (start / stride) % n != 0 {
                    continue;
                }
                for (j, slot) in line.iter_mut().enumerate() {
                    *slot = buf[start + j * stride];
                }
                fft.process(&mut line);
                for (j, v) in line.iter().enumerate() {
                    buf[start + j * stride] = *v;
                }
            }
        }
    }
    let scale = match direction {
        Direction::Forward => spec.measure(),
        Direction::Inverse => 1.0 / spec.volume(),
    };
    buf.iter_mut().for_each(|v| *v *= scale);
    Ok(buf)
}

/// Transform of a real field. `Forward` yields `f̃(p)`; `Inverse` treats the
/// field values as momentum-space data.
pub fn dft(field: &FieldConfig, direction: Direction) -> Result<Vec<Complex64>> {
    let data: Vec<Complex64> = field.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft_complex(field.lattice(), &data, direction)
}

pub fn dft_forward(field: &FieldConfig) -> Vec<Complex64> {
    dft(field, Direction::Forward).expect("field matches its own lattice")
}

/// Real field reconstructed from momentum-space data; imaginary parts
/// (which vanish for Hermitian input) are dropped.
pub fn dft_inverse_real(spec: &LatticeSpec, spectrum: &[Complex64]) -> Result<FieldConfig> {
    let back = dft_complex(spec, spectrum, Direction::Inverse)?;
    FieldConfig::new(*spec, back.iter().map(|c| c.re).collect())
}

/// `(f * K)(x) = a^d Σ_y K(x - y) f(y)` with `kernel` indexed by
/// displacement site. Evaluated through the convolution theorem.
pub fn lattice_convolve(f: &FieldConfig, kernel: &[f64]) -> Result<FieldConfig> {
    let spec = f.lattice();
    if kernel.len() != spec.sites() {
        return Err(Error::DimensionMismatch {
            expected: spec.sites(),
            got: kernel.len(),
        });
    }
    let kf = FieldConfig::new(*spec, kernel.to_vec())?;
    let ft = dft_forward(f);
    let kt = dft_forward(&kf);
    let prod: Vec<Complex64> = ft.iter().zip(&kt).map(|(a, b)| a * b).collect();
    dft_inverse_real(spec, &prod)
}
