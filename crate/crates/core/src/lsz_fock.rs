//! Momentum-space correlators with in/out phases, amputation of external
//! legs, the truncated occupancy basis and unitarity checks of gates on it.
//!
//! No asymptotic states exist on a periodic Euclidean lattice. The
//! "S-matrix element" here is the amputated connected correlator with the
//! textbook leg factors: a Euclidean proxy, labelled as such in outputs.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::action::{sourced_integral, BareActionParams, SourceField};
use crate::cascade::SampleBatch;
use crate::correlators::{self, CorrelatorRequest, GammaEstimate};
use crate::export::Num;
use crate::lattice::{LatticeSpec, MomentumVector};
use crate::quadrature::QuadratureSettings;
use crate::{Error, Result};

/// Largest `V^n` held as a dense position-space moment table.
pub const MAX_MOMENT_ENTRIES: usize = 1 << 16;

pub const CONVENTION: &str =
    "euclidean amputated connected correlator; legs divided by G2(p) sqrt(Z) (2pi)^(3/2)";
pub const CONVENTION_BARE: &str = "euclidean amputated connected correlator; legs divided by G2(p) sqrt(Z)";

/// Position-space moments `⟨φ(x_1)⋯φ(x_n)⟩`, flattened with `x_1` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMoments {
    pub lattice: LatticeSpec,
    pub n: usize,
    pub values: Vec<f64>,
}

impl PositionMoments {
    pub fn new(lattice: LatticeSpec, n: usize, values: Vec<f64>) -> Result<Self> {
        let expected = lattice.sites().pow(n as u32);
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Self { lattice, n, values })
    }

    fn check_scale(lattice: &LatticeSpec, n: usize) -> Result<()> {
        if n == 0 || n > correlators::MAX_POINTS {
            return Err(Error::InvalidParameter(format!("moment order {n} outside 1..=6")));
        }
        if lattice.sites().pow(n as u32) > MAX_MOMENT_ENTRIES {
            return Err(Error::InvalidParameter(format!(
                "{} moment entries above the limit {MAX_MOMENT_ENTRIES}",
                lattice.sites().pow(n as u32)
            )));
        }
        Ok(())
    }

    /// Moments by quadrature of the path integral.
    pub fn from_quadrature(params: &BareActionParams, n: usize) -> Result<Self> {
        let l = params.lattice;
        Self::check_scale(&l, n)?;
        if l.sites() > correlators::ORACLE_SITES {
            return Err(Error::ScaleExceeded {
                sites: l.sites(),
                limit: correlators::ORACLE_SITES,
            });
        }
        let v = l.sites();
        let count = v.pow(n as u32);
        let obs = |x: &[f64], out: &mut [f64]| fill_products(x, n, out);
        let r = sourced_integral(params, &SourceField::zeros(&l), count, &obs, &QuadratureSettings::default())?;
        Self::new(l, n, r.expectations)
    }

    /// Sample moments of a batch.
    pub fn from_batch(batch: &SampleBatch, n: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Self::check_scale(&batch.lattice, n)?;
        let count = batch.sites().pow(n as u32);
        let mut acc = vec![0.0; count];
        let mut buf = vec![0.0; count];
        for c in batch.iter() {
            fill_products(c, n, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        let m = batch.len() as f64;
        Self::new(batch.lattice, n, acc.into_iter().map(|a| a / m).collect())
    }
}

fn fill_products(x: &[f64], n: usize, out: &mut [f64]) {
    let v = x.len();
    for (idx, slot) in out.iter_mut().enumerate() {
        let mut rest = idx;
        let mut p = 1.0;
        for _ in 0..n {
            p *= x[rest % v];
            rest /= v;
        }
        *slot = p;
    }
}

/// `Γ(p, −q) = (1/V) a^{dn} Σ_x Π_out e^{+ip·x} Π_in e^{−iq·y} ⟨φ⋯φ⟩`.
/// Outgoing momenta come first in the moment's argument order.
pub fn fourier_correlator(
    moments: &PositionMoments,
    out_momenta: &[MomentumVector],
    in_momenta: &[MomentumVector],
) -> Result<Complex64> {
    let l = &moments.lattice;
    if out_momenta.len() + in_momenta.len() != moments.n {
        return Err(Error::DimensionMismatch {
            expected: moments.n,
            got: out_momenta.len() + in_momenta.len(),
        });
    }
    for p in out_momenta.iter().chain(in_momenta) {
        l.check_momentum(p)?;
    }
    let v = l.sites();
    let legs: Vec<(f64, &MomentumVector)> = out_momenta
        .iter()
        .map(|p| (1.0, p))
        .chain(in_momenta.iter().map(|q| (-1.0, q)))
        .collect();
    let phases: Vec<Vec<Complex64>> = legs
        .iter()
        .map(|(s, p)| (0..v).map(|x| Complex64::from_polar(1.0, s * p.phase(l, x))).collect())
        .collect();
    let mut total = Complex64::new(0.0, 0.0);
    for (idx, m) in moments.values.iter().enumerate() {
        if *m == 0.0 {
            continue;
        }
        let mut rest = idx;
        let mut w = Complex64::new(1.0, 0.0);
        for ph in &phases {
            w *= ph[rest % v];
            rest /= v;
        }
        total += w * m;
    }
    Ok(total * l.measure().powi(moments.n as i32) / l.volume())
}

/// The same quantity estimated directly from a batch, `⟨Π φ̃⟩/V` with
/// `φ̃(−p)` on outgoing legs.
pub fn fourier_correlator_mc(
    batch: &SampleBatch,
    out_momenta: &[MomentumVector],
    in_momenta: &[MomentumVector],
    connected: bool,
) -> Result<GammaEstimate> {
    let l = batch.lattice;
    let momenta: Vec<MomentumVector> = out_momenta
        .iter()
        .map(|p| p.negated(&l))
        .chain(in_momenta.iter().cloned())
        .collect();
    let req = CorrelatorRequest::new(&l, momenta, connected)?;
    let e = correlators::estimate_gamma_mc(batch, &req)?;
    let v = l.volume();
    Ok(GammaEstimate {
        value: e.value / v,
        stderr: e.stderr / v,
        n_samples: e.n_samples,
    })
}

/// Connected correlator by quadrature in the same normalization.
pub fn fourier_correlator_oracle(
    params: &BareActionParams,
    out_momenta: &[MomentumVector],
    in_momenta: &[MomentumVector],
    connected: bool,
) -> Result<Complex64> {
    let l = params.lattice;
    let momenta: Vec<MomentumVector> = out_momenta
        .iter()
        .map(|p| p.negated(&l))
        .chain(in_momenta.iter().cloned())
        .collect();
    let req = CorrelatorRequest::new(&l, momenta, connected)?;
    Ok(correlators::correlator_quadrature_oracle(params, &req)? / l.volume())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SMatrixElement {
    pub in_momenta: Vec<MomentumVector>,
    pub out_momenta: Vec<MomentumVector>,
    pub value: Complex64Record,
    pub stderr: Num,
    pub convention: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Complex64Record {
    pub re: Num,
    pub im: Num,
}

impl From<Complex64> for Complex64Record {
    fn from(c: Complex64) -> Self {
        Self { re: Num(c.re), im: Num(c.im) }
    }
}

impl SMatrixElement {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.value.re.0, self.value.im.0)
    }

    pub fn stderr(&self) -> f64 {
        self.stderr.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LszOptions {
    /// Apply the `(2π)^{3/2}` factor per leg.
    pub kinematic_factors: bool,
}

impl Default for LszOptions {
    fn default() -> Self {
        Self {
            kinematic_factors: true,
        }
    }
}

/// Divide each external leg by `G2(p) · Z^{1/2} · (2π)^{3/2}`.
pub fn lsz_amputate(
    gamma_connected: Complex64,
    gamma_stderr: f64,
    in_momenta: &[MomentumVector],
    out_momenta: &[MomentumVector],
    two_point: &[f64],
    residue_z: f64,
    options: &LszOptions,
) -> Result<SMatrixElement> {
    if in_momenta.is_empty() || out_momenta.is_empty() {
        return Err(Error::InvalidParameter("in and out momenta must be nonempty".into()));
    }
    let legs = in_momenta.len() + out_momenta.len();
    if two_point.len() != legs {
        return Err(Error::DimensionMismatch {
            expected: legs,
            got: two_point.len(),
        });
    }
    if let Some(i) = two_point.iter().position(|g| !(g.abs() > 1e-300) || !g.is_finite()) {
        return Err(Error::VanishingPropagator(i));
    }
    if !(residue_z > 0.0) {
        return Err(Error::InvalidParameter(format!("residue must be positive, got {residue_z}")));
    }
    let kin = if options.kinematic_factors {
        (2.0 * std::f64::consts::PI).powf(1.5)
    } else {
        1.0
    };
    let factor: f64 = two_point.iter().map(|g| 1.0 / (g * residue_z.sqrt() * kin)).product();
    Ok(SMatrixElement {
        in_momenta: in_momenta.to_vec(),
        out_momenta: out_momenta.to_vec(),
        value: (gamma_connected * factor).into(),
        stderr: Num(gamma_stderr * factor.abs()),
        convention: if options.kinematic_factors { CONVENTION } else { CONVENTION_BARE }.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidueFit {
    pub residue: Num,
    pub mass_sq: Num,
    /// Root-mean-square residual of `1/Γ` about the fitted line.
    pub rms_residual: Num,
}

/// Fit `Γ(p,−p) ≈ Z/(p̂² + m²)` by least squares on `1/Γ` against `p̂²`.
/// Samples are `(p̂², Γ)` pairs.
pub fn residue_z(samples: &[(f64, f64)]) -> Result<ResidueFit> {
    if samples.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} sample(s); need at least 2", samples.len())));
    }
    if let Some(i) = samples.iter().position(|(_, g)| *g == 0.0 || !g.is_finite()) {
        return Err(Error::VanishingPropagator(i));
    }
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ys: Vec<f64> = samples.iter().map(|s| 1.0 / s.1).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-14 * (1.0 + mx * mx) {
        return Err(Error::DegenerateFit("all samples share one momentum".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if !(slope > 0.0) {
        return Err(Error::DegenerateFit(format!("non-positive inverse-propagator slope {slope}")));
    }
    let intercept = my - slope * mx;
    let rms = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(ResidueFit {
        residue: Num(1.0 / slope),
        mass_sq: Num(intercept / slope),
        rms_residual: Num(rms),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FockState {
    pub occupancies: Vec<usize>,
    pub mode_momenta: Vec<MomentumVector>,
    pub cutoff: usize,
}

impl FockState {
    pub fn total(&self) -> usize {
        self.occupancies.iter().sum()
    }

    /// `|n_0,n_1,…⟩` with single-digit occupancies run together.
    pub fn label(&self) -> String {
        let sep = if self.occupancies.iter().any(|&n| n > 9) { "," } else { "" };
        let body: Vec<String> = self.occupancies.iter().map(|n| n.to_string()).collect();
        format!("|{}⟩", body.join(sep))
    }

    /// Occupancies of a momentum list: `n` copies of a mode fill it `n`
    /// times.
    pub fn from_momenta(momenta: &[MomentumVector], modes: &[MomentumVector], cutoff: usize) -> Result<Self> {
        let mut occ = vec![0; modes.len()];
        for p in momenta {
            let i = modes
                .iter()
                .position(|m| m == p)
                .ok_or_else(|| Error::StateOutsideBasis(format!("momentum {:?} is not a basis mode", p.modes())))?;
            occ[i] += 1;
        }
        let total: usize = occ.iter().sum();
        if total > cutoff {
            return Err(Error::StateOutsideBasis(format!("total occupancy {total} above cutoff {cutoff}")));
        }
        Ok(Self {
            occupancies: occ,
            mode_momenta: modes.to_vec(),
            cutoff,
        })
    }
}

/// Every occupancy tuple with total `≤ cutoff`, by increasing total and,
/// within a total, in descending lexicographic order
/// (`|00⟩, |10⟩, |01⟩, |20⟩, |11⟩, |02⟩, …`).
pub fn fock_enumerate(modes: &[MomentumVector], cutoff: usize) -> Result<Vec<FockState>> {
    for (i, m) in modes.iter().enumerate() {
        if modes[..i].contains(m) {
            return Err(Error::InvalidParameter(format!("duplicate mode {:?}", m.modes())));
        }
    }
    fn fill(k: usize, remaining: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k - 1 {
            cur.push(remaining);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for n in (0..=remaining).rev() {
            cur.push(n);
            fill(k, remaining - n, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=cutoff {
        if modes.is_empty() {
            if total == 0 {
                out.push(Vec::new());
            }
            continue;
        }
        fill(modes.len(), total, &mut Vec::new(), &mut out);
    }
    Ok(out
        .into_iter()
        .map(|occupancies| FockState {
            occupancies,
            mode_momenta: modes.to_vec(),
            cutoff,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    pub entries: DMatrix<Complex64>,
    /// State labels per row/column; empty for bare matrices.
    pub basis: Vec<FockState>,
}

impl GateMatrix {
    pub fn new(entries: DMatrix<Complex64>, basis: Vec<FockState>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::InvalidParameter(format!(
                "gate must be square, got {}×{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if !basis.is_empty() && basis.len() != entries.nrows() {
            return Err(Error::DimensionMismatch {
                expected: entries.nrows(),
                got: basis.len(),
            });
        }
        if let Some(i) = entries.iter().position(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { entries, basis })
    }

    pub fn from_real(rows: usize, data: &[f64]) -> Result<Self> {
        let cols = if rows == 0 { 0 } else { data.len() / rows };
        if rows * cols != data.len() {
            return Err(Error::InvalidParameter("data does not fill the rows".into()));
        }
        Self::new(
            DMatrix::from_row_iterator(rows, cols, data.iter().map(|&x| Complex64::new(x, 0.0))),
            Vec::new(),
        )
    }

    pub fn identity(basis: Vec<FockState>) -> Self {
        let n = basis.len();
        Self {
            entries: DMatrix::identity(n, n),
            basis,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitarityReport {
    /// `max_i |σ_i − 1|` over the singular values of `U`.
    pub defect: Num,
    /// `max(‖U†U − 𝕀‖_max, ‖UU† − 𝕀‖_max)`.
    pub gram_defect: Num,
    pub tolerance: Num,
    pub pass: bool,
}

/// Unitarity of `U` through its singular values and both Gram products.
/// Passes iff both defects are within `tolerance`.
pub fn check_unitary(gate: &GateMatrix, tolerance: f64) -> UnitarityReport {
    let u = &gate.entries;
    let n = u.nrows();
    let id = DMatrix::<Complex64>::identity(n, n);
    let left = u.adjoint() * u;
    let right = u * u.adjoint();
    let max_norm = |m: &DMatrix<Complex64>| m.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let gram = max_norm(&(&left - &id)).max(max_norm(&(&right - &id)));
    let defect = if n == 0 {
        0.0
    } else {
        // U†U is Hermitian PSD: embed as a real symmetric 2n×2n matrix,
        // whose eigenvalues are those of U†U, each twice.
        let real = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
            let c = left[(i % n, j % n)];
            match (i < n, j < n) {
                (true, true) | (false, false) => c.re,
                (true, false) => -c.im,
                (false, true) => c.im,
            }
        });
        SymmetricEigen::new(real)
            .eigenvalues
            .iter()
            .map(|&e| (e.max(0.0).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    };
    UnitarityReport {
        defect: Num(defect),
        gram_defect: Num(gram),
        tolerance: Num(tolerance),
        pass: defect <= tolerance && gram <= tolerance,
    }
}

/// Place `𝕀 + (S − 𝕀)` into the occupancy basis: row = out state, column =
/// in state, with momentum lists mapped to occupancies of identical modes.
pub fn smatrix_as_gate(
    elements: &[SMatrixElement],
    basis: &[FockState],
    tolerance: f64,
) -> Result<(GateMatrix, UnitarityReport)> {
    let mut gate = GateMatrix::identity(basis.to_vec());
    if !elements.is_empty() && basis.is_empty() {
        return Err(Error::StateOutsideBasis("empty basis".into()));
    }
    for e in elements {
        let (modes, cutoff) = (&basis[0].mode_momenta, basis[0].cutoff);
        let find = |momenta: &[MomentumVector]| -> Result<usize> {
            let s = FockState::from_momenta(momenta, modes, cutoff)?;
            basis
                .iter()
                .position(|b| b.occupancies == s.occupancies)
                .ok_or_else(|| Error::StateOutsideBasis(s.label()))
        };
        let col = find(&e.in_momenta)?;
        let row = find(&e.out_momenta)?;
        gate.entries[(row, col)] += e.value();
    }
    let report = check_unitary(&gate, tolerance);
    Ok((gate, report))
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

    #[test]
    fn lattice_propagator_from_moments() {
        let l = LatticeSpec::new(1, 4, 1.0).unwrap();
        let p = BareActionParams::new(l, 0.6, 0.0, true).unwrap();
        let m = PositionMoments::from_quadrature(&p, 2).unwrap();
        for k in 0..4 {
            let q = mom(&[k]);
            let g = fourier_correlator(&m, &[q.clone()], &[q.clone()]).unwrap();
            assert_abs_diff_eq!(g.re, 1.0 / (q.hat_sq(&l) + 0.6), epsilon = 1e-6);
            assert!(g.im.abs() < 1e-10);
            let conj = fourier_correlator(&m, &[q.negated(&l)], &[q.negated(&l)]).unwrap();
            assert!((g.conj() - conj).norm() < 1e-10);
        }
        let zero = PositionMoments::new(l, 2, vec![0.0; 16]).unwrap();
        assert_eq!(fourier_correlator(&zero, &[mom(&[1])], &[mom(&[1])]).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn moments_paths_agree() {
        let l = LatticeSpec::new(1, 3, 1.0).unwrap();
        let p = BareActionParams::new(l, 1.0, 0.0, true).unwrap();
        let b = bare_sample(&p, 20_000, 2, &SamplerSettings::default()).unwrap();
        let m = PositionMoments::from_batch(&b, 2).unwrap();
        let direct = fourier_correlator(&m, &[mom(&[1])], &[mom(&[2])]).unwrap();
        let est = fourier_correlator_mc(&b, &[mom(&[1])], &[mom(&[2])], false).unwrap();
        assert!((direct - est.value).norm() < 1e-10);
    }

    #[test]
    fn amputation_examples() {
        let p = [mom(&[])];
        let e = lsz_amputate(Complex64::new(2.0, 0.0), 0.1, &p, &p, &[1.0, 1.0], 1.0, &LszOptions::default()).unwrap();
        let kin = (2.0 * std::f64::consts::PI).powf(3.0);
        assert_abs_diff_eq!(e.value().re, 2.0 / kin, epsilon = 1e-15);
        assert!(matches!(
            lsz_amputate(Complex64::new(1.0, 0.0), 0.0, &p, &p, &[1.0, 0.0], 1.0, &LszOptions::default()),
            Err(Error::VanishingPropagator(1))
        ));
        let bare = LszOptions {
            kinematic_factors: false,
        };
        let e = lsz_amputate(Complex64::new(3.0, 0.0), 0.0, &p, &p, &[0.5, 2.0], 4.0, &bare).unwrap();
        assert_abs_diff_eq!(e.value().re, 3.0 / (0.5 * 2.0 * 4.0), epsilon = 1e-15);
    }

    #[test]
    fn weak_coupling_vertex() {
        let lambda = 0.01;
        let p = BareActionParams::zero_dimensional(1.0, lambda).unwrap();
        let zero = [mom(&[]), mom(&[])];
        let g4 = fourier_correlator_oracle(&p, &zero, &zero, true).unwrap();
        let g2 = fourier_correlator_oracle(&p, &zero[..1], &zero[..1], false).unwrap().re;
        let e = lsz_amputate(g4, 0.0, &zero, &zero, &[g2; 4], 1.0, &LszOptions { kinematic_factors: false }).unwrap();
        assert!((e.value().re + lambda).abs() < 0.1 * lambda, "{}", e.value().re);
    }

    #[test]
    fn residue_examples() {
        let l = LatticeSpec::new(1, 6, 1.0).unwrap();
        let samples: Vec<(f64, f64)> = (0..3)
            .map(|k| {
                let q = mom(&[k]).hat_sq(&l);
                (q, 1.0 / (q + 0.5))
            })
            .collect();
        let fit = residue_z(&samples).unwrap();
        assert_abs_diff_eq!(fit.residue.0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.mass_sq.0, 0.5, epsilon = 1e-12);
        let scaled: Vec<(f64, f64)> = samples.iter().map(|(q, g)| (*q, 4.0 * g)).collect();
        assert_abs_diff_eq!(residue_z(&scaled).unwrap().residue.0, 4.0, epsilon = 1e-12);
        assert!(matches!(residue_z(&samples[..1]), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn fock_examples() {
        let two = [mom(&[0]), mom(&[1])];
        let b = fock_enumerate(&two, 1).unwrap();
        let labels: Vec<String> = b.iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["|00⟩", "|10⟩", "|01⟩"]);
        let b = fock_enumerate(&two, 2).unwrap();
        let labels: Vec<String> = b.iter().map(|s| s.label()).collect();
        assert_eq!(labels[3..], ["|20⟩", "|11⟩", "|02⟩"]);
        assert_eq!(fock_enumerate(&two[..1], 3).unwrap().len(), 4);
        assert_eq!(fock_enumerate(&two, 0).unwrap().len(), 1);
        assert!(fock_enumerate(&[mom(&[0]), mom(&[0])], 1).is_err());
    }

    proptest! {
        #[test]
        fn fock_count_matches_brute_force(k in 1usize..4, cutoff in 0usize..5) {
            let modes: Vec<MomentumVector> = (0..k).map(|i| mom(&[i])).collect();
            let basis = fock_enumerate(&modes, cutoff).unwrap();
            let mut brute = 0;
            let total = (cutoff + 1).pow(k as u32);
            for idx in 0..total {
                let mut rest = idx;
                let mut s = 0;
                for _ in 0..k {
                    s += rest % (cutoff + 1);
                    rest /= cutoff + 1;
                }
                if s <= cutoff {
                    brute += 1;
                }
            }
            prop_assert_eq!(basis.len(), brute);
            let set: std::collections::HashSet<_> = basis.iter().map(|b| b.occupancies.clone()).collect();
            prop_assert_eq!(set.len(), brute);
        }

        #[test]
        fn identity_is_unitary(n in 1usize..257) {
            let g = GateMatrix::new(DMatrix::identity(n, n), Vec::new()).unwrap();
            let r = check_unitary(&g, 1e-15);
            prop_assert!(r.pass);
        }
    }

    #[test]
    fn unitary_examples() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let h = GateMatrix::from_real(2, &[s, s, s, -s]).unwrap();
        assert!(check_unitary(&h, 1e-12).pass);
        let ones = GateMatrix::from_real(2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let r = check_unitary(&ones, 1e-12);
        assert!(!r.pass);
        assert_abs_diff_eq!(r.defect.0, 1.0, epsilon = 1e-12);
        assert!(GateMatrix::from_real(2, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn gate_assembly() {
        let modes = [mom(&[0]), mom(&[1])];
        let basis = fock_enumerate(&modes, 2).unwrap();
        let (g, r) = smatrix_as_gate(&[], &basis, 1e-10).unwrap();
        assert_eq!(g.entries, DMatrix::identity(6, 6));
        assert_eq!(r.defect.0, 0.0);

        let mut last = 0.0;
        for eps in [1e-4, 1e-3, 1e-2] {
            let e = SMatrixElement {
                in_momenta: vec![mom(&[0])],
                out_momenta: vec![mom(&[1])],
                value: Complex64::new(eps, 0.0).into(),
                stderr: Num(0.0),
                convention: CONVENTION.into(),
            };
            let (g, r) = smatrix_as_gate(&[e], &basis, 1e-10).unwrap();
            assert_eq!(g.entries[(2, 1)], Complex64::new(eps, 0.0));
            assert!(r.defect.0 > last && r.defect.0 < 2.0 * eps);
            last = r.defect.0;
        }
        let outside = SMatrixElement {
            in_momenta: vec![mom(&[0]); 3],
            out_momenta: vec![mom(&[1])],
            value: Complex64::new(1.0, 0.0).into(),
            stderr: Num(0.0),
            convention: CONVENTION.into(),
        };
        assert!(matches!(smatrix_as_gate(&[outside], &basis, 1e-10), Err(Error::StateOutsideBasis(_))));
    }

    #[test]
    fn free_scattering_is_trivial() {
        let p = BareActionParams::zero_dimensional(1.0, 0.0).unwrap();
        let b = bare_sample(&p, 100_000, 21, &SamplerSettings::default()).unwrap();
        let z = [mom(&[]), mom(&[])];
        let g4 = fourier_correlator_mc(&b, &z, &z, true).unwrap();
        let g2 = fourier_correlator_mc(&b, &z[..1], &z[..1], false).unwrap().value.re;
        let e = lsz_amputate(g4.value, g4.stderr, &z, &z, &[g2; 4], 1.0, &LszOptions::default()).unwrap();
        assert!(e.value().norm() < 3.0 * e.stderr());
    }
}
