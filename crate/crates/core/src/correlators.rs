//! Momentum-space n-point functions `Γ(p_1,…,p_n) = ⟨φ̃(p_1)⋯φ̃(p_n)⟩`.
//!
//! Three independent routes: a Monte-Carlo average of the stacked
//! convolution functional `H_n` over sampled fields, direct quadrature of
//! the path integral, and finite differences of the generating function
//! `Z[J]` in the source.
//!
//! On a Euclidean lattice time ordering is vacuous and all correlators are
//! symmetric moments.

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{sourced_integral, BareActionParams, SourceField, SourcedAction};
use crate::cascade::SampleBatch;
use crate::export::Num;
use crate::lattice::{dft_forward, FieldConfig, LatticeSpec, MomentumVector};
use crate::quadrature::{integrate_fixed, QuadratureSettings};
use crate::{Error, Result};

pub const MAX_POINTS: usize = 6;
pub const MAX_CONNECTED_POINTS: usize = 4;
pub const ORACLE_SITES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelatorRequest {
    pub momenta: Vec<MomentumVector>,
    #[serde(default)]
    pub connected: bool,
}

impl CorrelatorRequest {
    pub fn new(lattice: &LatticeSpec, momenta: Vec<MomentumVector>, connected: bool) -> Result<Self> {
        let r = Self { momenta, connected };
        r.validate(lattice)?;
        Ok(r)
    }

    pub fn n(&self) -> usize {
        self.momenta.len()
    }

    pub fn validate(&self, lattice: &LatticeSpec) -> Result<()> {
        let n = self.n();
        if n == 0 || n > MAX_POINTS {
            return Err(Error::InvalidParameter(format!("correlators need 1..={MAX_POINTS} momenta, got {n}")));
        }
        if self.connected && n > MAX_CONNECTED_POINTS {
            return Err(Error::InvalidParameter(format!(
                "connected parts are available up to n = {MAX_CONNECTED_POINTS}"
            )));
        }
        for p in &self.momenta {
            lattice.check_momentum(p)?;
        }
        Ok(())
    }

    /// `Σ p_i ≡ 0` on the dual lattice.
    pub fn conserves_momentum(&self, lattice: &LatticeSpec) -> bool {
        let mut total = MomentumVector::zero(lattice);
        for p in &self.momenta {
            total = total.added(p, lattice);
        }
        total.is_zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaEstimate {
    pub value: Complex64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Export record for one correlator.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelatorRecord {
    pub momenta: Vec<Vec<usize>>,
    pub n: usize,
    pub connected: bool,
    pub value_re: Num,
    pub value_im: Num,
    pub stderr: Num,
    pub n_samples: usize,
    pub method: String,
}

impl CorrelatorRecord {
    pub fn new(request: &CorrelatorRequest, value: Complex64, stderr: f64, n_samples: usize, method: &str) -> Self {
        Self {
            momenta: request.momenta.iter().map(|p| p.modes().to_vec()).collect(),
            n: request.n(),
            connected: request.connected,
            value_re: Num(value.re),
            value_im: Num(value.im),
            stderr: Num(stderr),
            n_samples,
            method: method.to_string(),
        }
    }
}

fn check_momenta(lattice: &LatticeSpec, momenta: &[MomentumVector]) -> Result<()> {
    momenta.iter().try_for_each(|p| lattice.check_momentum(p))
}

/// Stacked convolution `G_n(x) = a^d Σ_y e^{−ip_n·(x+y)} G_{n−1}(x) G_0(x+y)`
/// with `G_0 = φ_a`. The phase refers to the absolute position of the
/// summed site, so every layer multiplies by one Fourier mode:
/// `G_n(x) = φ_a(x) Π_{i≤n} φ̃_a(p_i)`.
pub fn conv_stack_g(phi_a: &FieldConfig, momenta: &[MomentumVector]) -> Result<Vec<Complex64>> {
    let l = phi_a.lattice();
    check_momenta(l, momenta)?;
    let spectrum = dft_forward(phi_a);
    let factor: Complex64 = momenta.iter().map(|p| spectrum[p.index(l)]).product();
    Ok(phi_a.values().iter().map(|&v| factor * v).collect())
}

/// Direct double-loop evaluation of one convolution layer, kept as an
/// oracle for [`conv_stack_g`].
pub fn conv_layer_direct(phi_a: &FieldConfig, previous: &[Complex64], p: &MomentumVector) -> Result<Vec<Complex64>> {
    let l = phi_a.lattice();
    if previous.len() != l.sites() {
        return Err(Error::DimensionMismatch {
            expected: l.sites(),
            got: previous.len(),
        });
    }
    l.check_momentum(p)?;
    let m = l.measure();
    let phi = phi_a.values();
    Ok((0..l.sites())
        .map(|x| {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..l.sites() {
                let xy = l.add_sites(x, y);
                acc += Complex64::from_polar(1.0, -p.phase(l, xy)) * previous[x] * phi[xy];
            }
            acc * m
        })
        .collect())
}

/// `H_n[φ_a] = a^d Σ_y e^{−ip_n·y} G_{n−1}(y; p_1,…,p_{n−1}) = Π φ̃_a(p_i)`.
pub fn h_functional(phi_a: &FieldConfig, request: &CorrelatorRequest) -> Result<Complex64> {
    let l = phi_a.lattice();
    request.validate(l)?;
    let n = request.n();
    let g = conv_stack_g(phi_a, &request.momenta[..n - 1])?;
    let last = &request.momenta[n - 1];
    let m = l.measure();
    Ok(g.iter()
        .enumerate()
        .map(|(y, v)| Complex64::from_polar(1.0, -last.phase(l, y)) * v)
        .sum::<Complex64>()
        * m)
}

/// Precomputed `a^d e^{−ip·x}` for each requested momentum.
struct PhaseTable {
    rows: Vec<Vec<Complex64>>,
}

impl PhaseTable {
    fn new(l: &LatticeSpec, momenta: &[MomentumVector]) -> Self {
        let m = l.measure();
        Self {
            rows: momenta
                .iter()
                .map(|p| (0..l.sites()).map(|x| Complex64::from_polar(m, -p.phase(l, x))).collect())
                .collect(),
        }
    }

    fn transform(&self, phi: &[f64], out: &mut [Complex64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().zip(phi).map(|(w, v)| w * v).sum();
        }
    }
}

/// Products `Π_{i∈B} φ̃(p_i)` for every nonempty subset mask `B`.
fn subset_products(modes: &[Complex64], out: &mut [Complex64]) {
    out[0] = Complex64::new(1.0, 0.0);
    for mask in 1..out.len() {
        let low = mask.trailing_zeros() as usize;
        out[mask] = out[mask & (mask - 1)] * modes[low];
    }
}

/// All set partitions of `{0,…,n−1}` as lists of block masks.
fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, blocks: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(blocks.clone());
            return;
        }
        for b in 0..blocks.len() {
            blocks[b] |= 1 << i;
            rec(i + 1, n, blocks, out);
            blocks[b] &= !(1 << i);
        }
        blocks.push(1 << i);
        rec(i + 1, n, blocks, out);
        blocks.pop();
    }
    let mut out = Vec::new();
    rec(0, n, &mut Vec::new(), &mut out);
    out
}

/// Joint cumulant from subset moments `μ_B` (indexed by mask).
fn cumulant(n: usize, moments: &[Complex64]) -> Complex64 {
    let mut fact = [1.0f64; 8];
    for i in 1..8 {
        fact[i] = fact[i - 1] * i as f64;
    }
    set_partitions(n)
        .iter()
        .map(|blocks| {
            let k = blocks.len();
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            let prod: Complex64 = blocks.iter().map(|&b| moments[b]).product();
            prod * (sign * fact[k - 1])
        })
        .sum()
}

/// Sample average of `H_n` over a batch. Full correlators carry the
/// standard error of the mean; connected ones a delete-one-block jackknife
/// error over at most 100 contiguous blocks.
pub fn estimate_gamma_mc(batch: &SampleBatch, request: &CorrelatorRequest) -> Result<GammaEstimate> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let l = batch.lattice;
    request.validate(&l)?;
    let n = request.n();
    let masks = 1usize << n;
    let full = masks - 1;
    let table = PhaseTable::new(&l, &request.momenta);
    let total = batch.len();
    let n_blocks = total.min(100);

    // Per-block sums of every subset product plus the squared full product.
    let block_sums: Vec<(Vec<Complex64>, f64)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * total / n_blocks;
            let end = (b + 1) * total / n_blocks;
            let mut modes = vec![Complex64::new(0.0, 0.0); n];
            let mut prods = vec![Complex64::new(0.0, 0.0); masks];
            let mut sums = vec![Complex64::new(0.0, 0.0); masks];
            let mut sq = 0.0;
            for i in start..end {
                table.transform(batch.config(i), &mut modes);
                subset_products(&modes, &mut prods);
                for (s, p) in sums.iter_mut().zip(&prods) {
                    *s += p;
                }
                sq += prods[full].norm_sqr();
            }
            (sums, sq)
        })
        .collect();

    let mut sums = vec![Complex64::new(0.0, 0.0); masks];
    let mut sq = 0.0;
    for (s, q) in &block_sums {
        for (a, b) in sums.iter_mut().zip(s) {
            *a += b;
        }
        sq += q;
    }
    let nf = total as f64;
    let moments: Vec<Complex64> = sums.iter().map(|s| s / nf).collect();

    if !request.connected {
        let mean = moments[full];
        let var = if total > 1 {
            ((sq - nf * mean.norm_sqr()) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        return Ok(GammaEstimate {
            value: mean,
            stderr: (var / nf).sqrt(),
            n_samples: total,
        });
    }

    let value = cumulant(n, &moments);
    let stderr = if n_blocks > 1 {
        let block_sizes: Vec<f64> = (0..n_blocks)
            .map(|b| ((b + 1) * total / n_blocks - b * total / n_blocks) as f64)
            .collect();
        let jack: Vec<Complex64> = block_sums
            .iter()
            .zip(&block_sizes)
            .map(|((s, _), size)| {
                let m: Vec<Complex64> = sums.iter().zip(s).map(|(a, b)| (a - b) / (nf - size)).collect();
                cumulant(n, &m)
            })
            .collect();
        let g = n_blocks as f64;
        let mean_j: Complex64 = jack.iter().sum::<Complex64>() / g;
        let var: f64 = jack.iter().map(|j| (j - mean_j).norm_sqr()).sum::<f64>() * (g - 1.0) / g;
        var.sqrt()
    } else {
        0.0
    };
    Ok(GammaEstimate {
        value,
        stderr,
        n_samples: total,
    })
}

fn check_oracle_scale(params: &BareActionParams) -> Result<()> {
    let sites = params.lattice.sites();
    if sites > ORACLE_SITES {
        return Err(Error::ScaleExceeded {
            sites,
            limit: ORACLE_SITES,
        });
    }
    Ok(())
}

/// `⟨Π φ̃(p_i)⟩` (or its connected part) by quadrature of the path integral.
pub fn correlator_quadrature_oracle(params: &BareActionParams, request: &CorrelatorRequest) -> Result<Complex64> {
    check_oracle_scale(params)?;
    let l = params.lattice;
    request.validate(&l)?;
    let n = request.n();
    let masks = 1usize << n;
    let table = PhaseTable::new(&l, &request.momenta);
    let obs = |x: &[f64], out: &mut [f64]| {
        let mut modes = [Complex64::new(0.0, 0.0); MAX_POINTS];
        let mut prods = [Complex64::new(0.0, 0.0); 1 << MAX_POINTS];
        table.transform(x, &mut modes[..n]);
        subset_products(&modes[..n], &mut prods[..masks]);
        for m in 1..masks {
            out[2 * (m - 1)] = prods[m].re;
            out[2 * (m - 1) + 1] = prods[m].im;
        }
    };
    let settings = QuadratureSettings {
        tolerance: 1e-10,
        ..QuadratureSettings::default()
    };
    let r = sourced_integral(params, &SourceField::zeros(&l), 2 * (masks - 1), &obs, &settings)?;
    let mut moments = vec![Complex64::new(1.0, 0.0); masks];
    for m in 1..masks {
        moments[m] = Complex64::new(r.expectations[2 * (m - 1)], r.expectations[2 * (m - 1) + 1]);
    }
    Ok(if request.connected {
        cumulant(n, &moments)
    } else {
        moments[masks - 1]
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceDerivative {
    pub value: Complex64,
    /// Difference between the last two Richardson levels.
    pub truncation: f64,
}

/// Mixed n-th central difference of `Z[J]/Z[0]` (full) or `ln Z[J]`
/// (connected) along the real source directions `cos(p·x)`, `sin(p·x)`,
/// recombined into `φ̃(p) = A(p) − i B(p)`.
pub fn source_derivative(params: &BareActionParams, request: &CorrelatorRequest) -> Result<SourceDerivative> {
    check_oracle_scale(params)?;
    let l = params.lattice;
    request.validate(&l)?;
    let n = request.n();
    if n > MAX_CONNECTED_POINTS {
        return Err(Error::InvalidParameter(format!(
            "source derivatives are available up to n = {MAX_CONNECTED_POINTS}"
        )));
    }
    let sites = l.sites();
    let zero = SourceField::zeros(&l);
    let base = SourcedAction {
        params,
        source: &zero.values,
    };
    let frame = base.frame()?;
    let none = |_: &[f64], _: &mut [f64]| {};
    let probe = crate::quadrature::integrate(&base, &frame, 0, &none, &QuadratureSettings::default())?;
    let nodes = probe.nodes_per_site;
    let log_z = |j: &[f64]| -> f64 {
        let d = SourcedAction { params, source: j };
        integrate_fixed(&d, &frame, nodes, 0, &none).log_z
    };
    let log_z0 = log_z(&zero.values);

    // Real directions with a^d Σ d(x) φ(x) = A(p) or B(p).
    let dirs: Vec<[Vec<f64>; 2]> = request
        .momenta
        .iter()
        .map(|p| {
            let c = (0..sites).map(|x| p.phase(&l, x).cos()).collect();
            let s = (0..sites).map(|x| p.phase(&l, x).sin()).collect();
            [c, s]
        })
        .collect();
    let is_zero = |v: &[f64]| v.iter().all(|x| x.abs() < 1e-14);

    // Width of each combined source variable sets the step.
    let cov = crate::action::log_partition_hessian(params, &zero)?;
    let width = |d: &[f64]| {
        let v = DVector::from_column_slice(d);
        (v.dot(&(&cov * &v))).sqrt()
    };

    let f = |eps_dirs: &[(&[f64], f64)]| -> f64 {
        let mut j = vec![0.0; sites];
        for (d, e) in eps_dirs {
            for (a, b) in j.iter_mut().zip(d.iter()) {
                *a += e * b;
            }
        }
        let lz = log_z(&j) - log_z0;
        if request.connected {
            lz
        } else {
            lz.exp()
        }
    };

    let mut levels = [Complex64::new(0.0, 0.0); 3];
    for split in 0..(1usize << n) {
        let chosen: Vec<&[f64]> = (0..n).map(|i| dirs[i][(split >> i) & 1].as_slice()).collect();
        if chosen.iter().any(|d| is_zero(d)) {
            continue;
        }
        let n_b = split.count_ones();
        // (−i)^{#B}
        let coeff = match n_b % 4 {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, -1.0),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, 1.0),
        };
        let sigma = chosen.iter().map(|d| width(d)).fold(0.0, f64::max);
        if !(sigma > 1e-150 && sigma.is_finite()) {
            return Err(Error::StepUnderflow);
        }
        let h0 = 0.1 / sigma;
        let mut d = [0.0; 3];
        for (lvl, slot) in d.iter_mut().enumerate() {
            let h = h0 / (1 << lvl) as f64;
            let mut acc = 0.0;
            for signs in 0..(1usize << n) {
                let mut sign = 1.0;
                let eps: Vec<(&[f64], f64)> = (0..n)
                    .map(|i| {
                        let s = if (signs >> i) & 1 == 1 { -1.0 } else { 1.0 };
                        sign *= s;
                        (chosen[i], s * h)
                    })
                    .collect();
                acc += sign * f(&eps);
            }
            *slot = acc / (2.0 * h).powi(n as i32);
        }
        for (lvl, v) in d.iter().enumerate() {
            levels[lvl] += coeff * v;
        }
    }
    // Richardson table for an h² error series.
    let r1 = [(4.0 * levels[1] - levels[0]) / 3.0, (4.0 * levels[2] - levels[1]) / 3.0];
    let r2 = (16.0 * r1[1] - r1[0]) / 15.0;
    Ok(SourceDerivative {
        value: r2,
        truncation: (r2 - r1[1]).norm(),
    })
}

pub fn correlator_source_derivative_oracle(params: &BareActionParams, request: &CorrelatorRequest) -> Result<Complex64> {
    Ok(source_derivative(params, request)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{bare_sample, SamplerSettings};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mom(m: &[usize]) -> MomentumVector {
        MomentumVector::new(m.to_vec())
    }

    fn zero_dim_request(n: usize, connected: bool) -> CorrelatorRequest {
        CorrelatorRequest::new(&LatticeSpec::zero_dimensional(), vec![mom(&[]); n], connected).unwrap()
    }

    #[test]
    fn conv_stack_examples() {
        let l = LatticeSpec::new(1, 4, 1.0).unwrap();
        let c = FieldConfig::constant(l, 0.7);
        let g = conv_stack_g(&c, &[mom(&[0])]).unwrap();
        for v in &g {
            assert_abs_diff_eq!(v.re, 4.0 * 0.49, epsilon = 1e-12);
            assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-12);
        }
        for p in 1..4 {
            for v in conv_stack_g(&c, &[mom(&[p])]).unwrap() {
                assert!(v.norm() < 1e-12);
            }
        }
        let mut spike = vec![0.0; 4];
        spike[0] = 1.0;
        let s = FieldConfig::new(l, spike).unwrap();
        let g0: Vec<Complex64> = s.values().iter().map(|&v| v.into()).collect();
        for p in 0..4 {
            let fast = conv_stack_g(&s, &[mom(&[p])]).unwrap();
            let slow = conv_layer_direct(&s, &g0, &mom(&[p])).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-12);
            }
            assert!((fast[0] - 1.0).norm() < 1e-12);
        }
        assert!(matches!(conv_stack_g(&c, &[mom(&[4])]), Err(Error::OffLattice { .. })));
    }

    proptest! {
        #[test]
        fn layers_match_direct_sum(vals in proptest::collection::vec(-2.0f64..2.0, 9), p1 in 0usize..3, p2 in 0usize..3, q in 0usize..3) {
            let l = LatticeSpec::new(2, 3, 0.8).unwrap();
            let phi = FieldConfig::new(l, vals).unwrap();
            let ps = [mom(&[p1, p2]), mom(&[q, p1])];
            let mut g: Vec<Complex64> = phi.values().iter().map(|&v| v.into()).collect();
            for p in &ps {
                g = conv_layer_direct(&phi, &g, p).unwrap();
            }
            let fast = conv_stack_g(&phi, &ps).unwrap();
            for (a, b) in fast.iter().zip(&g) {
                prop_assert!((a - b).norm() < 1e-10 * (1.0 + b.norm()));
            }
        }

        #[test]
        fn h2_is_product_of_transforms(vals in proptest::collection::vec(-2.0f64..2.0, 5), p1 in 0usize..5, p2 in 0usize..5) {
            let l = LatticeSpec::new(1, 5, 0.6).unwrap();
            let phi = FieldConfig::new(l, vals).unwrap();
            let spec = dft_forward(&phi);
            let req = CorrelatorRequest::new(&l, vec![mom(&[p1]), mom(&[p2])], false).unwrap();
            let h = h_functional(&phi, &req).unwrap();
            prop_assert!((h - spec[p1] * spec[p2]).norm() < 1e-10);
            let swapped = CorrelatorRequest::new(&l, vec![mom(&[p2]), mom(&[p1])], false).unwrap();
            prop_assert!((h - h_functional(&phi, &swapped).unwrap()).norm() < 1e-10);
        }
    }

    #[test]
    fn h_small_cases() {
        let l = LatticeSpec::zero_dimensional();
        let phi = FieldConfig::constant(l, 1.3);
        assert_abs_diff_eq!(h_functional(&phi, &zero_dim_request(3, false)).unwrap().re, 1.3f64.powi(3), epsilon = 1e-12);
        let l = LatticeSpec::new(1, 3, 1.0).unwrap();
        let phi = FieldConfig::new(l, vec![0.1, -0.4, 0.9]).unwrap();
        let req = CorrelatorRequest::new(&l, vec![mom(&[2])], false).unwrap();
        assert!((h_functional(&phi, &req).unwrap() - dft_forward(&phi)[2]).norm() < 1e-12);
    }

    #[test]
    fn cumulants_of_gaussian_moments() {
        // Moments of a standard normal for all four copies of the same variable.
        let mut m = vec![Complex64::new(0.0, 0.0); 16];
        for (mask, slot) in m.iter_mut().enumerate() {
            *slot = match mask.count_ones() {
                0 => 1.0,
                2 => 1.0,
                4 => 3.0,
                _ => 0.0,
            }
            .into();
        }
        assert!(cumulant(4, &m).norm() < 1e-14);
        assert!((cumulant(2, &m) - 1.0).norm() < 1e-14);
        assert_eq!(set_partitions(4).len(), 15);
    }

    #[test]
    fn quadrature_oracle_examples() {
        let p = BareActionParams::zero_dimensional(1.0, 0.0).unwrap();
        assert_abs_diff_eq!(correlator_quadrature_oracle(&p, &zero_dim_request(2, false)).unwrap().re, 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(correlator_quadrature_oracle(&p, &zero_dim_request(4, false)).unwrap().re, 3.0, epsilon = 1e-8);
        assert!(correlator_quadrature_oracle(&p, &zero_dim_request(4, true)).unwrap().norm() < 1e-8);
        let q = BareActionParams::zero_dimensional(1.0, 1.0).unwrap();
        assert!(correlator_quadrature_oracle(&q, &zero_dim_request(2, false)).unwrap().re < 1.0);

        let l = LatticeSpec::new(1, 2, 1.0).unwrap();
        let p = BareActionParams::new(l, 1.0, 0.0, true).unwrap();
        for k in 0..2 {
            let req = CorrelatorRequest::new(&l, vec![mom(&[k]), mom(&[k])], false).unwrap();
            let exact = l.volume() / (mom(&[k]).hat_sq(&l) + 1.0);
            assert_abs_diff_eq!(correlator_quadrature_oracle(&p, &req).unwrap().re, exact, epsilon = 1e-7);
        }
        let big = BareActionParams::new(LatticeSpec::new(1, 5, 1.0).unwrap(), 1.0, 0.0, true).unwrap();
        let req = CorrelatorRequest::new(&big.lattice, vec![mom(&[0])], false).unwrap();
        assert!(correlator_quadrature_oracle(&big, &req).unwrap_err().is_scale_exceeded());
    }

    #[test]
    fn source_derivative_examples() {
        let p = BareActionParams::zero_dimensional(1.0, 0.0).unwrap();
        assert_abs_diff_eq!(correlator_source_derivative_oracle(&p, &zero_dim_request(2, false)).unwrap().re, 1.0, epsilon = 1e-5);
        assert!(correlator_source_derivative_oracle(&p, &zero_dim_request(1, false)).unwrap().norm() < 1e-6);
        assert_abs_diff_eq!(correlator_source_derivative_oracle(&p, &zero_dim_request(4, false)).unwrap().re, 3.0, epsilon = 1e-4);
        assert!(correlator_source_derivative_oracle(&p, &zero_dim_request(4, true)).unwrap().norm() < 1e-4);
    }

    #[test]
    fn source_derivative_on_lattice_matches_quadrature() {
        let l3 = LatticeSpec::new(1, 3, 1.0).unwrap();
        let l2 = LatticeSpec::new(1, 2, 1.0).unwrap();
        for (l, ms, connected) in [(l3, vec![1, 2], false), (l3, vec![1, 1, 1], false), (l2, vec![0, 1, 1, 0], true)] {
            let p = BareActionParams::new(l, 0.7, 0.5, true).unwrap();
            let req = CorrelatorRequest::new(&l, ms.iter().map(|&m| mom(&[m])).collect(), connected).unwrap();
            let q = correlator_quadrature_oracle(&p, &req).unwrap();
            let s = source_derivative(&p, &req).unwrap();
            assert!((q - s.value).norm() < 1e-5f64.max(10.0 * s.truncation), "{ms:?}: {q} vs {}", s.value);
        }
    }

    #[test]
    fn monte_carlo_examples() {
        let p = BareActionParams::zero_dimensional(1.0, 0.0).unwrap();
        let b = bare_sample(&p, 200_000, 4, &SamplerSettings::default()).unwrap();
        let two = estimate_gamma_mc(&b, &zero_dim_request(2, false)).unwrap();
        assert!((two.value.re - 1.0).abs() < 3.0 * two.stderr);
        let three = estimate_gamma_mc(&b, &zero_dim_request(3, false)).unwrap();
        assert!(three.value.norm() < 3.0 * three.stderr);
        let four = estimate_gamma_mc(&b, &zero_dim_request(4, false)).unwrap();
        assert!((four.value.re - 3.0).abs() < 3.0 * four.stderr);
        let c4 = estimate_gamma_mc(&b, &zero_dim_request(4, true)).unwrap();
        assert!(c4.value.norm() < 3.0 * c4.stderr, "{c4:?}");

        // Error bars shrink like n^{-1/2}.
        let half = SampleBatch {
            data: b.data[..100_000].to_vec(),
            ..b.clone()
        };
        let e_half = estimate_gamma_mc(&half, &zero_dim_request(2, false)).unwrap();
        let ratio = e_half.stderr / two.stderr;
        assert!((ratio - 2f64.sqrt()).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn momentum_conservation_on_lattice() {
        let l = LatticeSpec::new(1, 4, 1.0).unwrap();
        let p = BareActionParams::new(l, 1.0, 0.0, true).unwrap();
        let b = bare_sample(&p, 20_000, 8, &SamplerSettings::default()).unwrap();
        let req = CorrelatorRequest::new(&l, vec![mom(&[1]), mom(&[2])], false).unwrap();
        assert!(!req.conserves_momentum(&l));
        let e = estimate_gamma_mc(&b, &req).unwrap();
        assert!(e.value.norm() < 3.5 * e.stderr);
        assert!(matches!(
            estimate_gamma_mc(&SampleBatch { data: vec![], ..b }, &req),
            Err(Error::EmptyBatch)
        ));
    }
}
