//! One-variable Legendre transforms on tables and the audit of the chain
//! `ln Z[J] → Π[φ] → P_v ∝ e^{−Π} → moments` against source derivatives of
//! the same `ln Z`.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::Serialize;

use crate::action::{log_partition_hessian, log_partition_quadrature, BareActionParams, SourceField};
use crate::export::serialize_f64;
use crate::flow::{effective_action_oracle, GridPotential};
use crate::quadrature::simpson_uniform;
use crate::{Error, Result};

/// Tolerance on second differences for a table to count as convex.
pub const CONVEXITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexFunctionTable {
    #[serde(serialize_with = "crate::export::serialize_f64_slice")]
    pub grid: Vec<f64>,
    #[serde(serialize_with = "crate::export::serialize_f64_slice")]
    pub values: Vec<f64>,
}

impl ConvexFunctionTable {
    /// Build a table on a strictly increasing grid. Convexity is checked by
    /// [`convexity_check`] and enforced by [`legendre_transform`].
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if grid.len() < 3 {
            return Err(Error::InvalidParameter("tables need at least 3 points".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("grid must be strictly increasing".into()));
        }
        if let Some(i) = grid.iter().chain(&values).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i % grid.len()));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: Vec<f64>, f: F) -> Result<Self> {
        let values = grid.iter().map(|&x| f(x)).collect();
        Self::new(grid, values)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Second divided differences `f[x_{i−1}, x_i, x_{i+1}]·2`.
    pub fn second_differences(&self) -> Vec<f64> {
        let (x, f) = (&self.grid, &self.values);
        (1..x.len() - 1)
            .map(|i| {
                let s1 = (f[i] - f[i - 1]) / (x[i] - x[i - 1]);
                let s2 = (f[i + 1] - f[i]) / (x[i + 1] - x[i]);
                2.0 * (s2 - s1) / (x[i + 1] - x[i - 1])
            })
            .collect()
    }

    /// Centred slopes at the second and second-to-last nodes.
    pub fn slope_range(&self) -> (f64, f64) {
        let (x, f) = (&self.grid, &self.values);
        let n = x.len();
        ((f[2] - f[0]) / (x[2] - x[0]), (f[n - 1] - f[n - 3]) / (x[n - 1] - x[n - 3]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexityReport {
    #[serde(serialize_with = "serialize_f64")]
    pub min_curvature: f64,
    pub argmin: usize,
    pub pass: bool,
}

/// Minimum second difference of `values` over `grid`; passes iff
/// `≥ −1e−8`.
pub fn convexity_check(table: &ConvexFunctionTable) -> ConvexityReport {
    let d = table.second_differences();
    let (argmin, min) = d
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i + 1, v) } else { acc });
    ConvexityReport {
        min_curvature: min,
        argmin,
        pass: min >= -CONVEXITY_TOLERANCE,
    }
}

/// `sup_x [x y − f(x)]`: best grid node, then the vertex of the parabola
/// through it and its neighbours when that vertex stays inside the cell pair.
pub fn conjugate_at(f: &ConvexFunctionTable, y: f64) -> f64 {
    let (x, v) = (&f.grid, &f.values);
    let g = |i: usize| x[i] * y - v[i];
    let (best, gbest) = (0..x.len()).fold((0, f64::NEG_INFINITY), |acc, i| {
        let gi = g(i);
        if gi > acc.1 {
            (i, gi)
        } else {
            acc
        }
    });
    let mid = best.clamp(1, x.len() - 2);
    let (x0, x1, x2) = (x[mid - 1], x[mid], x[mid + 1]);
    let (g0, g1, g2) = (g(mid - 1), g(mid), g(mid + 1));
    // Newton form of the interpolating parabola.
    let d01 = (g1 - g0) / (x1 - x0);
    let d12 = (g2 - g1) / (x2 - x1);
    let c = (d12 - d01) / (x2 - x0);
    if !(c < 0.0) {
        return gbest;
    }
    let b = d01 - c * (x0 + x1);
    let xv = -b / (2.0 * c);
    if xv < x0 || xv > x2 {
        return gbest;
    }
    // Polish on the local cubic interpolant; the value is stationary in x,
    // so the cubic's O(h⁴) accuracy carries over to f*.
    let mut xs = xv;
    for _ in 0..3 {
        let (_, d1, d2) = local_cubic(x, v, xs);
        if !(d2 > 0.0) {
            break;
        }
        xs = (xs - (d1 - y) / d2).clamp(x0, x2);
    }
    let (fv, _, _) = local_cubic(x, v, xs);
    (xs * y - fv).max(gbest)
}

/// Value, first and second derivative of the four-point Lagrange cubic
/// around `t`.
fn local_cubic(x: &[f64], v: &[f64], t: f64) -> (f64, f64, f64) {
    let n = x.len();
    if n < 4 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let cell = x.partition_point(|&xi| xi <= t).saturating_sub(1);
    let s = cell.saturating_sub(1).min(n - 4);
    let xs = &x[s..s + 4];
    let vs = &v[s..s + 4];
    let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for i in 0..4 {
        let others: Vec<usize> = (0..4).filter(|&j| j != i).collect();
        let denom: f64 = others.iter().map(|&j| xs[i] - xs[j]).product();
        let a: Vec<f64> = others.iter().map(|&j| t - xs[j]).collect();
        let l = a[0] * a[1] * a[2];
        let dl = a[1] * a[2] + a[0] * a[2] + a[0] * a[1];
        let ddl = 2.0 * (a[0] + a[1] + a[2]);
        f += vs[i] * l / denom;
        d1 += vs[i] * dl / denom;
        d2 += vs[i] * ddl / denom;
    }
    (f, d1, d2)
}

/// Legendre transform of a convex table onto `out_grid`, or by default onto
/// a uniform grid of the same size spanning the interior secant slopes.
pub fn legendre_transform(f: &ConvexFunctionTable, out_grid: Option<&[f64]>) -> Result<ConvexFunctionTable> {
    let report = convexity_check(f);
    if !report.pass {
        return Err(Error::NonConvex {
            index: report.argmin,
            value: report.min_curvature,
        });
    }
    let grid: Vec<f64> = match out_grid {
        Some(g) => g.to_vec(),
        None => {
            let (lo, hi) = f.slope_range();
            let n = f.len();
            if !(hi > lo) {
                return Err(Error::InvalidParameter("table is affine; its conjugate is a point".into()));
            }
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        }
    };
    let values: Vec<f64> = grid.par_iter().map(|&y| conjugate_at(f, y)).collect();
    ConvexFunctionTable::new(grid, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YoungFenchelReport {
    /// `min_{i,j} f(x_i) + f*(y_j) − x_i y_j`; nonnegative when the
    /// inequality holds on every grid pair.
    #[serde(serialize_with = "serialize_f64")]
    pub min_gap: f64,
    /// `max |f(x) + f*(f'(x)) − x f'(x)|` over interior nodes.
    #[serde(serialize_with = "serialize_f64")]
    pub max_pairing_gap: f64,
}

pub fn young_fenchel(f: &ConvexFunctionTable, conj: &ConvexFunctionTable) -> YoungFenchelReport {
    let min_gap = f
        .grid
        .par_iter()
        .zip(&f.values)
        .map(|(x, fx)| {
            conj.grid
                .iter()
                .zip(&conj.values)
                .map(|(y, fy)| fx + fy - x * y)
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min);
    let (x, v) = (&f.grid, &f.values);
    let max_pairing_gap = (1..x.len() - 1)
        .map(|i| {
            let slope = (v[i + 1] - v[i - 1]) / (x[i + 1] - x[i - 1]);
            (v[i] + conjugate_at(f, slope) - x[i] * slope).abs()
        })
        .fold(0.0, f64::max);
    YoungFenchelReport {
        min_gap,
        max_pairing_gap,
    }
}

/// `max |f** − f|` over grid points strictly inside the slope range of `f*`.
pub fn biconjugation_defect(f: &ConvexFunctionTable) -> Result<f64> {
    let conj = legendre_transform(f, None)?;
    let back = legendre_transform(&conj, Some(&f.grid))?;
    let (lo, hi) = conj.slope_range();
    let n = f.len();
    let margin = n / 20 + 1;
    Ok((margin..n - margin)
        .filter(|&i| f.grid[i] > lo && f.grid[i] < hi)
        .map(|i| (back.values[i] - f.values[i]).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HessianReport {
    #[serde(serialize_with = "serialize_f64")]
    pub min_eigenvalue: f64,
    pub pass: bool,
}

/// Smallest eigenvalue of the `ln Z` source Hessian over the given sources.
pub fn log_partition_psd_check(params: &BareActionParams, sources: &[SourceField]) -> Result<HessianReport> {
    let mut min = f64::INFINITY;
    for s in sources {
        let h = log_partition_hessian(params, s)?;
        let e = SymmetricEigen::new(h).eigenvalues.min();
        min = min.min(e);
    }
    Ok(HessianReport {
        min_eigenvalue: min,
        pass: min >= -CONVEXITY_TOLERANCE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    /// Must hold; failure is an error of the round trip.
    Assert,
    /// Quantifies a claim; recorded without a verdict on the pipeline.
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkRecord {
    pub link: String,
    #[serde(serialize_with = "serialize_f64")]
    pub residual: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub tolerance: f64,
    pub pass: bool,
    pub kind: LinkKind,
}

impl LinkRecord {
    fn new(link: &str, residual: f64, tolerance: f64, kind: LinkKind) -> Self {
        Self {
            link: link.to_string(),
            residual,
            tolerance,
            pass: residual.abs() <= tolerance,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BijectionReport {
    pub links: Vec<LinkRecord>,
    /// `⟨φ²⟩` under `P_v ∝ e^{−Π}` and from `∂²_J ln Z`.
    #[serde(serialize_with = "serialize_f64")]
    pub pv_second_moment: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub source_second_moment: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub pv_fourth_moment: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub source_fourth_moment: f64,
}

impl BijectionReport {
    pub fn link(&self, name: &str) -> Option<&LinkRecord> {
        self.links.iter().find(|l| l.link == name)
    }

    /// First asserted link that failed.
    pub fn check(&self) -> Result<()> {
        match self.links.iter().find(|l| l.kind == LinkKind::Assert && !l.pass) {
            Some(l) => Err(Error::LinkFailed {
                link: l.link.clone(),
                residual: l.residual,
                tolerance: l.tolerance,
            }),
            None => Ok(()),
        }
    }
}

fn fourth_derivative_at_center(t: &ConvexFunctionTable) -> (f64, f64) {
    // Five-point stencils on the uniform source grid.
    let c = t.len() / 2;
    let h = t.grid[1] - t.grid[0];
    let f = |k: isize| t.values[(c as isize + k) as usize];
    let d2 = (-f(2) + 16.0 * f(1) - 30.0 * f(0) + 16.0 * f(-1) - f(-2)) / (12.0 * h * h);
    let d4 = (-f(3) + 12.0 * f(2) - 39.0 * f(1) + 56.0 * f(0) - 39.0 * f(-1) + 12.0 * f(-2) - f(-3))
        / (6.0 * h.powi(4));
    (d2, d4)
}

/// The round trip without the verdict; see [`bijection_roundtrip`].
pub fn bijection_report(params: &BareActionParams) -> Result<BijectionReport> {
    if params.lattice.sites() != 1 {
        return Err(Error::ScaleExceeded {
            sites: params.lattice.sites(),
            limit: 1,
        });
    }
    let sigma = params.field_scale();
    let phi_max = 9.0 * sigma;
    let j_max = params.potential_d1(phi_max).abs().max(1.0);
    let n_j = 801;
    let j_grid: Vec<f64> = (0..n_j).map(|i| -j_max + 2.0 * j_max * i as f64 / (n_j - 1) as f64).collect();
    let log_z: Vec<f64> = j_grid
        .par_iter()
        .map(|&j| log_partition_quadrature(params, &SourceField::uniform(&params.lattice, j)))
        .collect::<Result<_>>()?;
    let lnz = ConvexFunctionTable::new(j_grid, log_z)?;
    let mut links = Vec::new();

    let conv = convexity_check(&lnz);
    links.push(LinkRecord::new(
        "lnz_convexity",
        (-conv.min_curvature).max(0.0),
        CONVEXITY_TOLERANCE,
        LinkKind::Assert,
    ));

    // Π on a symmetric field grid well inside the slope range.
    let n_phi = 481;
    let phi_edge = 8.0 * sigma;
    let phi_grid = GridPotential::uniform_nodes(n_phi, phi_edge);
    let pi = legendre_transform(&lnz, Some(&phi_grid))?;
    let back = legendre_transform(&pi, Some(&lnz.grid))?;
    let (lo, hi) = pi.slope_range();
    let bic = lnz
        .grid
        .iter()
        .zip(back.values.iter().zip(&lnz.values))
        .filter(|(j, _)| **j > 0.9 * lo && **j < 0.9 * hi)
        .map(|(_, (a, b))| (a - b).abs())
        .fold(0.0, f64::max);
    links.push(LinkRecord::new("biconjugation", bic, 1e-6, LinkKind::Assert));

    let yf = young_fenchel(&lnz, &pi);
    links.push(LinkRecord::new(
        "young_fenchel",
        (-yf.min_gap).max(0.0),
        1e-12,
        LinkKind::Assert,
    ));

    // Independent maximization path for Π at a handful of points.
    let check_grid = GridPotential::uniform_nodes(9, 2.0 * sigma);
    let newton = effective_action_oracle(params, &check_grid)?;
    let newton_dev = check_grid
        .iter()
        .map(|&p| {
            let idx = phi_grid
                .iter()
                .position(|q| (q - p).abs() < 1e-9 * sigma)
                .map(|i| pi.values[i]);
            let table = idx.unwrap_or_else(|| conjugate_at(&lnz, p));
            (table - newton.value_at(p).unwrap_or(f64::NAN)).abs()
        })
        .fold(0.0, f64::max);
    links.push(LinkRecord::new("legendre_vs_maximization", newton_dev, 1e-6, LinkKind::Assert));

    // P_v candidate e^{−Π}/Z₀.
    let h = phi_grid[1] - phi_grid[0];
    let log_z0 = lnz.values[n_j / 2];
    let pi_min = pi.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = pi.values.iter().map(|v| (-(v - pi_min)).exp()).collect();
    let mass = simpson_uniform(&w, h);
    let norm_residual = mass.ln() - pi_min - log_z0;
    links.push(LinkRecord::new("pv_normalization", norm_residual, 1e-6, LinkKind::Report));

    let moment = |k: i32| {
        let v: Vec<f64> = w.iter().zip(&phi_grid).map(|(w, p)| w * p.powi(k)).collect();
        simpson_uniform(&v, h) / mass
    };
    let pv2 = moment(2);
    let pv4 = moment(4);
    let (d2, d4) = fourth_derivative_at_center(&lnz);
    // Even theory: ⟨φ²⟩ = κ₂, ⟨φ⁴⟩ = κ₄ + 3κ₂².
    let src2 = d2;
    let src4 = d4 + 3.0 * d2 * d2;
    // Source derivatives against direct quadrature of the same theory.
    let exact2 = log_partition_hessian(params, &SourceField::zeros(&params.lattice))?[(0, 0)];
    links.push(LinkRecord::new("source_derivative", src2 - exact2, 1e-6, LinkKind::Assert));
    let kind = if params.is_gaussian() {
        LinkKind::Assert
    } else {
        LinkKind::Report
    };
    links.push(LinkRecord::new("moment_phi2", pv2 - src2, 1e-6, kind));
    links.push(LinkRecord::new("moment_phi4", pv4 - src4, 1e-4, kind));

    Ok(BijectionReport {
        links,
        pv_second_moment: pv2,
        source_second_moment: src2,
        pv_fourth_moment: pv4,
        source_fourth_moment: src4,
    })
}

/// `ln Z → Π → P_v → moments` for a single-site theory. Fails on the first
/// asserted link outside its tolerance.
pub fn bijection_roundtrip(params: &BareActionParams) -> Result<BijectionReport> {
    let r = bijection_report(params)?;
    r.check()?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn quadratic_conjugates() {
        let f = ConvexFunctionTable::from_fn(grid(201, -5.0, 5.0), |x| 0.5 * x * x).unwrap();
        let c = legendre_transform(&f, None).unwrap();
        for (y, v) in c.grid.iter().zip(&c.values) {
            assert_abs_diff_eq!(*v, 0.5 * y * y, epsilon = 1e-8);
        }
        let m2 = 2.5;
        let f = ConvexFunctionTable::from_fn(grid(201, -5.0, 5.0), |x| x * x / (2.0 * m2) + 0.3).unwrap();
        let c = legendre_transform(&f, Some(&grid(41, -1.5, 1.5))).unwrap();
        for (y, v) in c.grid.iter().zip(&c.values) {
            assert_abs_diff_eq!(*v, m2 * y * y / 2.0 - 0.3, epsilon = 1e-8);
        }
    }

    #[test]
    fn biconjugation_of_smooth_convex() {
        let f = ConvexFunctionTable::from_fn(grid(801, -3.0, 3.0), |x: f64| x.cosh() + 0.1 * x.powi(4)).unwrap();
        assert!(biconjugation_defect(&f).unwrap() < 1e-6);
    }

    #[test]
    fn non_convex_rejected() {
        let f = ConvexFunctionTable::from_fn(grid(51, -2.0, 2.0), |x: f64| -x * x).unwrap();
        assert!(matches!(legendre_transform(&f, None), Err(Error::NonConvex { .. })));
    }

    #[test]
    fn convexity_examples() {
        let g = ConvexFunctionTable::from_fn(grid(41, -2.0, 2.0), |j| 0.5 * j * j).unwrap();
        assert_abs_diff_eq!(convexity_check(&g).min_curvature, 1.0, epsilon = 1e-10);
        let c = ConvexFunctionTable::from_fn(grid(41, -2.0, 2.0), |_| 1.7).unwrap();
        let r = convexity_check(&c);
        assert!(r.pass);
        assert_abs_diff_eq!(r.min_curvature, 0.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn young_fenchel_holds(a in 0.2f64..3.0, b in -1.0f64..1.0, c in 0.0f64..0.5) {
            let f = ConvexFunctionTable::from_fn(grid(301, -3.0, 3.0), |x| a * x * x + b * x + c * x.powi(4)).unwrap();
            let conj = legendre_transform(&f, None).unwrap();
            prop_assert!(convexity_check(&conj).pass);
            let yf = young_fenchel(&f, &conj);
            prop_assert!(yf.min_gap >= -1e-12);
            prop_assert!(yf.max_pairing_gap < 1e-6);
        }
    }

    #[test]
    fn hessian_is_psd() {
        let l = crate::LatticeSpec::new(1, 2, 1.0).unwrap();
        let p = BareActionParams::new(l, 0.5, 1.0, true).unwrap();
        let sources = [SourceField::zeros(&l), SourceField::new(vec![0.7, -1.2]).unwrap()];
        assert!(log_partition_psd_check(&p, &sources).unwrap().pass);
    }

    #[test]
    fn roundtrip_gaussian_normalized() {
        let p = BareActionParams::zero_dimensional(2.0 * std::f64::consts::PI, 0.0).unwrap();
        let r = bijection_roundtrip(&p).unwrap();
        for l in &r.links {
            assert!(l.residual.abs() < 1e-6, "{l:?}");
        }
        assert!((r.pv_second_moment - r.source_second_moment).abs() < 1e-6);
    }

    #[test]
    fn roundtrip_gaussian_unit_mass_reports_offset() {
        let p = BareActionParams::zero_dimensional(1.0, 0.0).unwrap();
        let r = bijection_roundtrip(&p).unwrap();
        let norm = r.link("pv_normalization").unwrap();
        assert_abs_diff_eq!(norm.residual, 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-6);
        assert!(!norm.pass);
    }

    #[test]
    fn roundtrip_quartic_reports() {
        let p = BareActionParams::zero_dimensional(1.0, 1.0).unwrap();
        let r = bijection_report(&p).unwrap();
        r.check().unwrap();
        assert_eq!(r.link("moment_phi2").unwrap().kind, LinkKind::Report);
    }
}
