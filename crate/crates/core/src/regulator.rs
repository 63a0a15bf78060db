//! Infrared regulators `R_k(p)` and the layer regulator term.
//!
//! Both families are normalized so that `R_k(0) = k²`; on the single-site
//! lattice they coincide.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::lattice::{dft_complex, dft_forward, momentum_grid, Direction, FieldConfig, LatticeSpec, MomentumVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegulatorFamily {
    /// `(k² − p̂²) θ(k² − p̂²)`
    #[default]
    Litim,
    /// `p̂² / (e^{p̂²/k²} − 1)`
    Exponential,
}

impl RegulatorFamily {
    pub fn name(&self) -> &'static str {
        match self {
            RegulatorFamily::Litim => "litim",
            RegulatorFamily::Exponential => "exponential",
        }
    }

    /// `R_k` as a function of the lattice momentum squared.
    pub fn value(&self, k: f64, p_sq: f64) -> f64 {
        let k2 = k * k;
        match self {
            RegulatorFamily::Litim => (k2 - p_sq).max(0.0),
            RegulatorFamily::Exponential => {
                if k == 0.0 {
                    return 0.0;
                }
                k2 * bernoulli_ratio(p_sq / k2)
            }
        }
    }

    /// `∂R_k/∂k` as a function of the lattice momentum squared.
    pub fn k_derivative(&self, k: f64, p_sq: f64) -> f64 {
        match self {
            RegulatorFamily::Litim => {
                if k * k > p_sq {
                    2.0 * k
                } else {
                    0.0
                }
            }
            RegulatorFamily::Exponential => {
                if k == 0.0 {
                    return 0.0;
                }
                let x = p_sq / (k * k);
                // d/dk [k² B(x)] with x = p²/k²: 2k (B − x B').
                let combo = if x < 1e-4 {
                    1.0 - x * x / 12.0
                } else {
                    // B'(x) = (e^x − 1 − x e^x)/(e^x − 1)², rewritten with e^{-x}.
                    let em = (-x).exp();
                    let b_prime = (em * (1.0 - em) - x * em) / ((1.0 - em) * (1.0 - em));
                    bernoulli_ratio(x) - x * b_prime
                };
                2.0 * k * combo
            }
        }
    }
}

/// `x / (e^x − 1)`, stable for all `x ≥ 0`.
fn bernoulli_ratio(x: f64) -> f64 {
    if x < 1e-8 {
        1.0 - 0.5 * x
    } else if x > 700.0 {
        0.0
    } else {
        x / x.exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegulatorSpec {
    pub family: RegulatorFamily,
    pub scale: f64,
    pub lattice: LatticeSpec,
}

impl RegulatorSpec {
    pub fn new(family: RegulatorFamily, scale: f64, lattice: LatticeSpec) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::InvalidParameter(format!("regulator scale must be nonnegative, got {scale}")));
        }
        Ok(Self { family, scale, lattice })
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        Self { scale, ..*self }
    }

    /// `R_k(p)` on every momentum of [`momentum_grid`].
    pub fn spectrum(&self) -> Vec<f64> {
        momentum_grid(&self.lattice)
            .iter()
            .map(|p| regulator_value(self, p))
            .collect()
    }

    pub fn k_derivative_spectrum(&self) -> Vec<f64> {
        momentum_grid(&self.lattice)
            .iter()
            .map(|p| regulator_k_derivative(self, p))
            .collect()
    }

    /// Position-space kernel `R̂_k(r) = (1/V) Σ_p e^{ip·r} R_k(p)`, indexed by
    /// displacement site. Diagnostic only: every application inside the
    /// crate goes through the spectral form.
    pub fn position_kernel(&self) -> Vec<f64> {
        let spec: Vec<Complex64> = self.spectrum().into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        dft_complex(&self.lattice, &spec, Direction::Inverse)
            .expect("spectrum matches lattice")
            .into_iter()
            .map(|c| c.re)
            .collect()
    }

    /// Root-mean-square spread of `|R̂_k|` in minimal-image distance: the
    /// width of the receptive field a layer at scale `k` sees.
    pub fn receptive_field_width(&self) -> f64 {
        let kernel = self.position_kernel();
        let l = &self.lattice;
        let n = l.sites_per_dim() as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for (r, w) in kernel.iter().enumerate() {
            let dist_sq: f64 = l
                .coords(r)
                .iter()
                .map(|&c| {
                    let c = c as f64;
                    let d = c.min(n - c) * l.spacing();
                    d * d
                })
                .sum();
            num += w.abs() * dist_sq;
            den += w.abs();
        }
        if den == 0.0 {
            0.0
        } else {
            (num / den).sqrt()
        }
    }
}

pub fn regulator_value(spec: &RegulatorSpec, p: &MomentumVector) -> f64 {
    spec.family.value(spec.scale, p.hat_sq(&spec.lattice))
}

pub fn regulator_k_derivative(spec: &RegulatorSpec, p: &MomentumVector) -> f64 {
    spec.family.k_derivative(spec.scale, p.hat_sq(&spec.lattice))
}

/// `T_a[φ]_k = ∫d^dx d^dy (φ_a(y) − ½φ(y)) R̂_k(y−x) φ(x)`, evaluated as
/// `(1/V) Σ_p R_k(p) [φ̃_a(−p) − ½φ̃(−p)] φ̃(p)`.
pub fn regulator_term(phi: &FieldConfig, phi_a: &FieldConfig, spec: &RegulatorSpec) -> Result<f64> {
    if phi.lattice() != &spec.lattice || phi_a.lattice() != &spec.lattice {
        return Err(Error::DimensionMismatch {
            expected: spec.lattice.sites(),
            got: phi.values().len(),
        });
    }
    let ft = dft_forward(phi);
    let fa = dft_forward(phi_a);
    let total: f64 = spec
        .spectrum()
        .iter()
        .zip(ft.iter().zip(&fa))
        .map(|(r, (f, a))| r * ((a.conj() - 0.5 * f.conj()) * f).re)
        .sum();
    Ok(total / spec.lattice.volume())
}

/// Ultraviolet-cutoff-sized regulator on a single-site lattice.
pub fn zero_dimensional(family: RegulatorFamily, scale: f64) -> RegulatorSpec {
    RegulatorSpec {
        family,
        scale,
        lattice: LatticeSpec::zero_dimensional(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec(family: RegulatorFamily, k: f64) -> RegulatorSpec {
        RegulatorSpec::new(family, k, LatticeSpec::new(1, 4, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn litim_values() {
        let s = spec(RegulatorFamily::Litim, 1.0);
        let p0 = MomentumVector::new(vec![0]);
        let p1 = MomentumVector::new(vec![1]); // p̂² = 2
        assert_eq!(regulator_value(&s, &p0), 1.0);
        assert_eq!(regulator_value(&s, &p1), 0.0);
        assert_eq!(regulator_k_derivative(&s, &p0), 2.0);
        assert_eq!(regulator_k_derivative(&s, &p1), 0.0);
    }

    #[test]
    fn exponential_zero_momentum_limit() {
        let f = RegulatorFamily::Exponential;
        assert_abs_diff_eq!(f.value(1.0, 0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.value(1.0, 1e-10), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f.k_derivative(1.5, 0.0), 3.0, epsilon = 1e-15);
        assert_eq!(f.value(0.0, 2.0), 0.0);
    }

    #[test]
    fn families_agree_in_zero_dimensions() {
        for k in [0.0, 0.3, 1.0, 50.0] {
            let a = zero_dimensional(RegulatorFamily::Litim, k);
            let b = zero_dimensional(RegulatorFamily::Exponential, k);
            let p = MomentumVector::new(vec![]);
            assert_abs_diff_eq!(regulator_value(&a, &p), k * k, epsilon = 1e-12);
            assert_abs_diff_eq!(regulator_value(&b, &p), k * k, epsilon = 1e-12);
            assert_abs_diff_eq!(regulator_k_derivative(&b, &p), 2.0 * k, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn exponential_derivative_matches_finite_difference(k in 0.05f64..20.0, p_sq in 0.0f64..40.0) {
            let f = RegulatorFamily::Exponential;
            let h = 1e-5 * k;
            let fd = (f.value(k + h, p_sq) - f.value(k - h, p_sq)) / (2.0 * h);
            let an = f.k_derivative(k, p_sq);
            prop_assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "fd {} an {}", fd, an);
        }

        #[test]
        fn litim_derivative_matches_away_from_edge(k in 0.05f64..20.0, p_sq in 0.0f64..40.0) {
            prop_assume!((k * k - p_sq).abs() > 1e-3);
            let f = RegulatorFamily::Litim;
            let h = 1e-7 * k;
            let fd = (f.value(k + h, p_sq) - f.value(k - h, p_sq)) / (2.0 * h);
            prop_assert!((fd - f.k_derivative(k, p_sq)).abs() < 1e-6);
        }

        #[test]
        fn regulators_nonnegative_and_monotone(k in 0.0f64..10.0, dk in 0.0f64..1.0, p_sq in 0.0f64..20.0) {
            for f in [RegulatorFamily::Litim, RegulatorFamily::Exponential] {
                let r = f.value(k, p_sq);
                prop_assert!(r >= 0.0);
                prop_assert!(f.value(k + dk, p_sq) >= r - 1e-12);
            }
        }

        #[test]
        fn term_linear_in_mean_field(
            phi in proptest::collection::vec(-2.0f64..2.0, 4),
            phi_a in proptest::collection::vec(-2.0f64..2.0, 4),
            alpha in -3.0f64..3.0,
        ) {
            let s = spec(RegulatorFamily::Exponential, 1.3);
            let l = s.lattice;
            let f = FieldConfig::new(l, phi).unwrap();
            let a = FieldConfig::new(l, phi_a.clone()).unwrap();
            let scaled = FieldConfig::new(l, phi_a.iter().map(|v| alpha * v).collect()).unwrap();
            let t0 = regulator_term(&f, &FieldConfig::zeros(l), &s).unwrap();
            let t1 = regulator_term(&f, &a, &s).unwrap();
            let ta = regulator_term(&f, &scaled, &s).unwrap();
            prop_assert!(((ta - t0) - alpha * (t1 - t0)).abs() < 1e-10);
        }
    }

    #[test]
    fn vanishing_regulator_and_field() {
        let l = LatticeSpec::new(1, 4, 1.0).unwrap();
        let f = FieldConfig::new(l, vec![0.3, -1.0, 0.2, 2.0]).unwrap();
        let s0 = spec(RegulatorFamily::Litim, 0.0);
        assert_eq!(regulator_term(&f, &f, &s0).unwrap(), 0.0);
        let s = spec(RegulatorFamily::Litim, 1.7);
        assert_eq!(regulator_term(&FieldConfig::zeros(l), &f, &s).unwrap(), 0.0);
    }

    #[test]
    fn term_at_mean_field_is_half_regulated_norm() {
        let c = 1.7;
        let s = zero_dimensional(RegulatorFamily::Litim, 1.0);
        let f = FieldConfig::new(s.lattice, vec![c]).unwrap();
        assert_abs_diff_eq!(regulator_term(&f, &f, &s).unwrap(), 0.5 * c * c, epsilon = 1e-14);

        let s = spec(RegulatorFamily::Exponential, 0.9);
        let f = FieldConfig::new(s.lattice, vec![0.3, -1.0, 0.2, 2.0]).unwrap();
        let ft = dft_forward(&f);
        let expected: f64 = s
            .spectrum()
            .iter()
            .zip(&ft)
            .map(|(r, v)| 0.5 * r * v.norm_sqr())
            .sum::<f64>()
            / s.lattice.volume();
        let t = regulator_term(&f, &f, &s).unwrap();
        assert!(t >= 0.0);
        assert_abs_diff_eq!(t, expected, epsilon = 1e-12);
    }

    #[test]
    fn kernel_width_shrinks_with_scale() {
        let l = LatticeSpec::new(1, 32, 1.0).unwrap();
        let small = RegulatorSpec::new(RegulatorFamily::Exponential, 0.3, l).unwrap();
        let large = RegulatorSpec::new(RegulatorFamily::Exponential, 1.5, l).unwrap();
        assert!(small.receptive_field_width() > large.receptive_field_width());
    }
}
