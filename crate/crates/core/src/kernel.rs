//! Collision kernels `B_ij = C^Φ_ij |v - v*|^γ b_ij(cos θ, z)` with an
//! uncertain angular part, and the assumption checks that go with them.
//!
//! Every angular part is separable in `z`:
//! `b_ij(cos θ, z) = b0_ij(cos θ) + b1_ij(cos θ) φ(z)`, with each of `b0_ij`,
//! `b1_ij` of the form `a |sin θ| |cos θ| + c`. `φ(z) = z` for
//! [`AngularKind::LinearInZ`]; [`ZProfile`] gives the smooth alternatives.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{SpeciesSet, SphereRule};

/// `a |sin θ| |cos θ| + c`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularCoeffs {
    pub a: f64,
    pub c: f64,
}

impl AngularCoeffs {
    pub const ZERO: AngularCoeffs = AngularCoeffs { a: 0.0, c: 0.0 };

    pub fn constant(c: f64) -> Self {
        Self { a: 0.0, c }
    }

    pub fn eval(&self, cos_theta: f64) -> f64 {
        self.a * sin_cos(cos_theta) + self.c
    }

    /// Supremum of `|a s + c|` over `s ∈ [0, 1/2]`.
    fn sup_abs(&self) -> f64 {
        self.c.abs().max((0.5 * self.a + self.c).abs())
    }
}

/// `|sin θ| |cos θ|` from `cos θ`.
pub fn sin_cos(cos_theta: f64) -> f64 {
    let c = cos_theta.clamp(-1.0, 1.0);
    (1.0 - c * c).max(0.0).sqrt() * c.abs()
}

/// Smooth z-profiles `φ` with closed-form derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum ZProfile {
    /// `exp(rate z)`
    Exp { rate: f64 },
    /// `sin(freq z + phase)`
    Sin { freq: f64, phase: f64 },
    /// `Σ_m coeffs[m] z^m`
    Poly { coeffs: Vec<f64> },
}

impl ZProfile {
    /// `φ^{(k)}(z)`
    pub fn derivative(&self, z: f64, k: usize) -> f64 {
        match self {
            ZProfile::Exp { rate } => rate.powi(k as i32) * (rate * z).exp(),
            ZProfile::Sin { freq, phase } => freq.powi(k as i32) * (freq * z + phase + 0.5 * PI * k as f64).sin(),
            ZProfile::Poly { coeffs } => {
                let mut acc = 0.0;
                for m in (k..coeffs.len()).rev() {
                    let falling: f64 = (0..k).map(|t| (m - t) as f64).product();
                    acc = acc * z + coeffs[m] * falling;
                }
                acc
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AngularKind {
    /// `φ(z) = z`; all derivatives of order ≥ 2 vanish.
    LinearInZ,
    /// `φ` smooth, derivatives available up to `max_order`.
    GeneralSmooth { profile: ZProfile, max_order: usize },
}

/// Coefficient tables of the two angular components, one entry per ordered
/// species pair (row-major `N × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct AngularModel {
    pub kind: AngularKind,
    pub n_species: usize,
    pub b0: Vec<AngularCoeffs>,
    pub b1: Vec<AngularCoeffs>,
}

impl AngularModel {
    pub fn new(kind: AngularKind, n_species: usize, b0: Vec<AngularCoeffs>, b1: Vec<AngularCoeffs>) -> Result<Self> {
        let nn = n_species * n_species;
        if b0.len() != nn || b1.len() != nn {
            return Err(Error::Mismatch(format!("angular tables need {nn} entries, have {} / {}", b0.len(), b1.len())));
        }
        if b0.iter().chain(&b1).any(|t| !t.a.is_finite() || !t.c.is_finite()) {
            return Err(Error::invalid("angular", "coefficients must be finite"));
        }
        Ok(Self { kind, n_species, b0, b1 })
    }

    /// Same coefficients for every pair.
    pub fn uniform(kind: AngularKind, n_species: usize, b0: AngularCoeffs, b1: AngularCoeffs) -> Self {
        let nn = n_species * n_species;
        Self {
            kind,
            n_species,
            b0: vec![b0; nn],
            b1: vec![b1; nn],
        }
    }

    pub fn b0(&self, i: usize, j: usize) -> AngularCoeffs {
        self.b0[i * self.n_species + j]
    }

    pub fn b1(&self, i: usize, j: usize) -> AngularCoeffs {
        self.b1[i * self.n_species + j]
    }

    /// Highest z-derivative order that may be requested, `None` if unbounded.
    pub fn max_order(&self) -> Option<usize> {
        match &self.kind {
            AngularKind::LinearInZ => None,
            AngularKind::GeneralSmooth { max_order, .. } => Some(*max_order),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, AngularKind::LinearInZ)
    }

    /// `φ^{(k)}(z)`
    pub fn phi(&self, z: f64, k: usize) -> f64 {
        match &self.kind {
            AngularKind::LinearInZ => match k {
                0 => z,
                1 => 1.0,
                _ => 0.0,
            },
            AngularKind::GeneralSmooth { profile, .. } => profile.derivative(z, k),
        }
    }

    /// `sup_{|z| ≤ c_z} |φ(z)|`; equals `c_z` for the linear kind.
    pub fn phi_sup(&self, c_z: f64) -> f64 {
        match &self.kind {
            AngularKind::LinearInZ => c_z,
            AngularKind::GeneralSmooth { profile, .. } => {
                let m = 4096;
                (0..=m)
                    .map(|t| profile.derivative(-c_z + 2.0 * c_z * t as f64 / m as f64, 0).abs())
                    .fold(0.0, f64::max)
            }
        }
    }
}

/// Weights `(w0, w1)` with `∂_z^k b = w0 b0 + w1 b1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelMix {
    pub w0: f64,
    pub w1: f64,
}

impl KernelMix {
    pub const B0: KernelMix = KernelMix { w0: 1.0, w1: 0.0 };
    pub const B1: KernelMix = KernelMix { w0: 0.0, w1: 1.0 };

    pub fn is_zero(&self) -> bool {
        self.w0 == 0.0 && self.w1 == 0.0
    }
}

/// The factorized collision kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel {
    gamma: f64,
    n_species: usize,
    c_phi: Vec<f64>,
    pub angular: AngularModel,
    pub c_b: f64,
    pub c_b1: f64,
}

impl KernelModel {
    /// `c_phi` is row-major `N × N`, symmetric with positive entries.
    pub fn new(gamma: f64, c_phi: Vec<f64>, angular: AngularModel, c_b: f64, c_b1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 1]"));
        }
        let n = angular.n_species;
        if c_phi.len() != n * n {
            return Err(Error::Mismatch(format!("c_phi needs {} entries", n * n)));
        }
        if c_phi.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("c_phi", "entries must be positive"));
        }
        for i in 0..n {
            for j in 0..i {
                if c_phi[i * n + j] != c_phi[j * n + i] {
                    return Err(Error::invalid("c_phi", "matrix must be symmetric"));
                }
            }
        }
        if !(c_b > 0.0) || !(c_b1 > 0.0) {
            return Err(Error::invalid("c_b", "bounds must be positive"));
        }
        Ok(Self {
            gamma,
            n_species: n,
            c_phi,
            angular,
            c_b,
            c_b1,
        })
    }

    /// Same kinetic constant and angular coefficients for every pair.
    pub fn uniform(gamma: f64, n_species: usize, c_phi: f64, kind: AngularKind, b0: AngularCoeffs, b1: AngularCoeffs) -> Result<Self> {
        let angular = AngularModel::uniform(kind, n_species, b0, b1);
        let c_b = (b0.sup_abs() + b1.sup_abs()).max(1.0);
        Self::new(gamma, vec![c_phi; n_species * n_species], angular, c_b, b1.sup_abs().max(1e-300))
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn c_phi(&self, i: usize, j: usize) -> f64 {
        self.c_phi[i * self.n_species + j]
    }

    pub fn check_species(&self, species: &SpeciesSet) -> Result<()> {
        if species.len() != self.n_species {
            return Err(Error::Mismatch(format!(
                "kernel has {} species, species set has {}",
                self.n_species,
                species.len()
            )));
        }
        Ok(())
    }

    /// `Φ_ij(s) = C^Φ_ij s^γ`
    pub fn eval_phi(&self, i: usize, j: usize, relative_speed: f64) -> f64 {
        self.c_phi(i, j) * speed_factor(relative_speed, self.gamma)
    }

    /// Mixing weights of `∂_z^k b` at `z`.
    pub fn mix(&self, z: f64, k: usize) -> Result<KernelMix> {
        if let Some(max) = self.angular.max_order() {
            if k > max {
                return Err(Error::DerivativeOrder { requested: k, max });
            }
        }
        Ok(if k == 0 {
            KernelMix {
                w0: 1.0,
                w1: self.angular.phi(z, 0),
            }
        } else {
            KernelMix {
                w0: 0.0,
                w1: self.angular.phi(z, k),
            }
        })
    }

    /// `∂_z^k b_ij(cos θ, z)`
    pub fn eval_b(&self, i: usize, j: usize, cos_theta: f64, z: f64, k: usize) -> Result<f64> {
        if !(cos_theta.abs() <= 1.0) {
            return Err(Error::invalid("cos_theta", "must lie in [-1, 1]"));
        }
        let mix = self.mix(z, k)?;
        Ok(self.eval_b_mix(i, j, cos_theta, mix))
    }

    pub fn eval_b_mix(&self, i: usize, j: usize, cos_theta: f64, mix: KernelMix) -> f64 {
        let s = sin_cos(cos_theta);
        let (p, q) = self.pair_coeffs(i, j, mix);
        p * s + q
    }

    /// `(α, β)` with `∂^k b_ij = α |sin θ cos θ| + β` for the given mix.
    pub fn pair_coeffs(&self, i: usize, j: usize, mix: KernelMix) -> (f64, f64) {
        let b0 = self.angular.b0(i, j);
        let b1 = self.angular.b1(i, j);
        (mix.w0 * b0.a + mix.w1 * b1.a, mix.w0 * b0.c + mix.w1 * b1.c)
    }

    /// `C^Φ_ij · (α, β)` for every ordered pair, row-major.
    pub fn pair_table(&self, mix: KernelMix) -> Vec<(f64, f64)> {
        let n = self.n_species;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (a, c) = self.pair_coeffs(i, j, mix);
                let cp = self.c_phi(i, j);
                out.push((cp * a, cp * c));
            }
        }
        out
    }

    /// `D_ij(cos θ)` at one angle.
    pub fn d_value(&self, i: usize, j: usize, cos_theta: f64, q: u32, c_z: f64) -> f64 {
        let factor = (2f64.powi(q as i32) + 2.0) * self.angular.phi_sup(c_z);
        d_from(self.angular.b0(i, j), self.angular.b1(i, j), sin_cos(cos_theta), factor)
    }
}

pub(crate) fn d_from(b0: AngularCoeffs, b1: AngularCoeffs, s: f64, factor: f64) -> f64 {
    b0.a * s + b0.c - factor * (b1.a * s + b1.c).abs()
}

/// `s^γ`, with `0^0 = 1`.
pub(crate) fn speed_factor(s: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        s.powf(gamma)
    }
}

/// Per-pair results of [`validate_assumptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairAssumptions {
    pub i: usize,
    pub j: usize,
    /// `max |b_ij - b_ji|` over the sample grid.
    pub symmetry_residual: f64,
    pub min_b: f64,
    pub max_b: f64,
    /// `max |∂_z^k b_ij|` for `k = 0..=r`.
    pub max_deriv: Vec<f64>,
    pub max_b1: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Sampled `min_{σ1,σ2} ∫ min{b_ii(σ1·σ3), b_ii(σ2·σ3)} dσ3` (diagonal pairs only).
    pub overlap_lower: Option<f64>,
}

impl PairAssumptions {
    pub fn symmetric(&self) -> bool {
        self.symmetry_residual <= 1e-14 * self.max_b.abs().max(1.0)
    }

    pub fn b_bounded(&self, c_b: f64) -> bool {
        self.min_b > 0.0 && self.max_b <= c_b
    }

    pub fn derivs_bounded(&self, c_b: f64) -> bool {
        self.max_deriv.iter().all(|d| *d <= c_b)
    }

    pub fn d_ok(&self, c_b: f64) -> bool {
        self.d_min > 0.0 && self.d_max <= c_b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub q: u32,
    pub c_z: f64,
    pub r: usize,
    pub c_b: f64,
    pub c_b1: f64,
    pub pairs: Vec<PairAssumptions>,
}

impl AssumptionReport {
    /// Smallest lower-bound slack `d` over all pairs and angles.
    pub fn min_d(&self) -> f64 {
        self.pairs.iter().map(|p| p.d_min).fold(f64::INFINITY, f64::min)
    }

    pub fn all_pass(&self) -> bool {
        self.pairs.iter().all(|p| {
            p.symmetric()
                && p.b_bounded(self.c_b)
                && p.derivs_bounded(self.c_b)
                && p.max_b1 <= self.c_b1
                && p.d_ok(self.c_b)
                && p.overlap_lower.is_none_or(|h| h > 0.0)
        })
    }
}

const THETA_SAMPLES: usize = 2048;
const Z_SAMPLES: usize = 64;

/// Samples the kernel on 2048 angles × 64 z-values in `[-c_z, c_z]` and
/// reports symmetry, bounds, derivative bounds, the lower-bound slack `d` and the
/// angular overlap integral.
pub fn validate_assumptions(model: &KernelModel, q: u32, c_z: f64, r: usize, sphere: &SphereRule) -> Result<AssumptionReport> {
    if !(c_z > 0.0) {
        return Err(Error::invalid("c_z", "must be positive"));
    }
    if let Some(max) = model.angular.max_order() {
        if r > max {
            return Err(Error::DerivativeOrder { requested: r, max });
        }
    }
    let n = model.n_species();
    let cosines: Vec<f64> = (0..THETA_SAMPLES).map(|t| (PI * t as f64 / (THETA_SAMPLES - 1) as f64).cos()).collect();
    let zs: Vec<f64> = (0..Z_SAMPLES).map(|t| -c_z + 2.0 * c_z * t as f64 / (Z_SAMPLES - 1) as f64).collect();
    let factor = (2f64.powi(q as i32) + 2.0) * model.angular.phi_sup(c_z);
    let mut pairs = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let mut sym: f64 = 0.0;
            let mut min_b = f64::INFINITY;
            let mut max_b = f64::NEG_INFINITY;
            let mut max_deriv = vec![0.0f64; r + 1];
            for &z in &zs {
                let mixes: Vec<KernelMix> = (0..=r).map(|k| model.mix(z, k)).collect::<Result<_>>()?;
                for &ct in &cosines {
                    let b = model.eval_b_mix(i, j, ct, mixes[0]);
                    sym = sym.max((b - model.eval_b_mix(j, i, ct, mixes[0])).abs());
                    min_b = min_b.min(b);
                    max_b = max_b.max(b);
                    for (k, m) in mixes.iter().enumerate() {
                        max_deriv[k] = max_deriv[k].max(model.eval_b_mix(i, j, ct, *m).abs());
                    }
                }
            }
            let b0 = model.angular.b0(i, j);
            let b1 = model.angular.b1(i, j);
            let mut d_min = f64::INFINITY;
            let mut d_max = f64::NEG_INFINITY;
            let mut max_b1: f64 = 0.0;
            for &ct in &cosines {
                let s = sin_cos(ct);
                let d = d_from(b0, b1, s, factor);
                d_min = d_min.min(d);
                d_max = d_max.max(d);
                max_b1 = max_b1.max((b1.a * s + b1.c).abs());
            }
            let overlap_lower = (i == j).then(|| angular_overlap_bound(model, i, c_z, sphere));
            pairs.push(PairAssumptions {
                i,
                j,
                symmetry_residual: sym,
                min_b,
                max_b,
                max_deriv,
                max_b1,
                d_min,
                d_max,
                overlap_lower,
            });
        }
    }
    Ok(AssumptionReport {
        q,
        c_z,
        r,
        c_b: model.c_b,
        c_b1: model.c_b1,
        pairs,
    })
}

fn angular_overlap_bound(model: &KernelModel, i: usize, c_z: f64, sphere: &SphereRule) -> f64 {
    // at most 48 sample directions for σ1, σ2; σ3 runs over the full rule
    let stride = sphere.len().div_ceil(48).max(1);
    let picks: Vec<usize> = (0..sphere.len()).step_by(stride).collect();
    let zs = [-c_z, -0.5 * c_z, 0.0, 0.5 * c_z, c_z];
    let dot = |a: &[f64; 3], b: &[f64; 3]| (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    let mut best = f64::INFINITY;
    for z in zs {
        let Ok(mix) = model.mix(z, 0) else { continue };
        for &s1 in &picks {
            for &s2 in &picks {
                let mut acc = 0.0;
                for (s3, w) in sphere.nodes.iter().zip(&sphere.weights) {
                    let b1 = model.eval_b_mix(i, i, dot(&sphere.nodes[s1], s3), mix);
                    let b2 = model.eval_b_mix(i, i, dot(&sphere.nodes[s2], s3), mix);
                    acc += w * b1.min(b2);
                }
                best = best.min(acc);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(b0: f64, b1: f64) -> KernelModel {
        KernelModel::uniform(0.0, 2, 1.0, AngularKind::LinearInZ, AngularCoeffs::constant(b0), AngularCoeffs::constant(b1)).unwrap()
    }

    #[test]
    fn kinetic_factor() {
        let m = KernelModel::uniform(1.0, 2, 2.0, AngularKind::LinearInZ, AngularCoeffs::constant(1.0), AngularCoeffs::ZERO).unwrap();
        assert_eq!(m.eval_phi(0, 1, 3.0), 6.0);
        let m0 = KernelModel::uniform(0.0, 2, 1.5, AngularKind::LinearInZ, AngularCoeffs::constant(1.0), AngularCoeffs::ZERO).unwrap();
        assert_eq!(m0.eval_phi(1, 1, 7.3), 1.5);
        assert_eq!(m0.eval_phi(1, 1, 0.0), 1.5);
        let mh = KernelModel::uniform(0.5, 2, 1.0, AngularKind::LinearInZ, AngularCoeffs::constant(1.0), AngularCoeffs::ZERO).unwrap();
        assert!((mh.eval_phi(0, 0, 4.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn linear_kernel_values_and_derivatives() {
        let m = linear(1.0, 0.1);
        assert!((m.eval_b(0, 1, 0.3, 0.5, 0).unwrap() - 1.05).abs() < 1e-15);
        assert_eq!(m.eval_b(0, 1, 0.3, 0.0, 0).unwrap(), 1.0);
        assert_eq!(m.eval_b(0, 1, -0.7, 0.9, 2).unwrap(), 0.0);
        assert_eq!(m.eval_b(0, 1, -0.7, 0.9, 5).unwrap(), 0.0);
        assert!(m.eval_b(0, 1, 1.5, 0.0, 0).is_err());
        // affine in z: centered difference reproduces the first derivative
        let d = 0.25;
        let fd = (m.eval_b(1, 0, 0.2, 0.3 + d, 0).unwrap() - m.eval_b(1, 0, 0.2, 0.3 - d, 0).unwrap()) / (2.0 * d);
        assert!((fd - m.eval_b(1, 0, 0.2, 0.3, 1).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn smooth_profiles_differentiate() {
        let profiles = [
            ZProfile::Exp { rate: 0.7 },
            ZProfile::Sin { freq: 1.3, phase: 0.4 },
            ZProfile::Poly {
                coeffs: vec![0.5, -1.0, 0.25, 2.0],
            },
        ];
        for p in &profiles {
            for k in 0..3 {
                let z = 0.37;
                let h = 1e-4;
                let fd = (p.derivative(z + h, k) - p.derivative(z - h, k)) / (2.0 * h);
                assert!((fd - p.derivative(z, k + 1)).abs() < 1e-6, "{p:?} k={k}");
            }
        }
        let poly = ZProfile::Poly { coeffs: vec![1.0, 2.0, 3.0] };
        assert!((poly.derivative(2.0, 0) - 17.0).abs() < 1e-14);
        assert!((poly.derivative(2.0, 1) - 14.0).abs() < 1e-14);
        assert!((poly.derivative(2.0, 2) - 6.0).abs() < 1e-14);
        assert_eq!(poly.derivative(2.0, 3), 0.0);
    }

    #[test]
    fn smooth_kernel_rejects_high_orders() {
        let kind = AngularKind::GeneralSmooth {
            profile: ZProfile::Exp { rate: 1.0 },
            max_order: 2,
        };
        let m = KernelModel::uniform(0.0, 2, 1.0, kind, AngularCoeffs::constant(1.0), AngularCoeffs::constant(0.1)).unwrap();
        assert!(m.eval_b(0, 0, 0.0, 0.1, 2).is_ok());
        assert!(matches!(m.eval_b(0, 0, 0.0, 0.1, 3), Err(Error::DerivativeOrder { requested: 3, max: 2 })));
    }

    #[test]
    fn invalid_models_rejected() {
        let ang = AngularModel::uniform(AngularKind::LinearInZ, 2, AngularCoeffs::constant(1.0), AngularCoeffs::ZERO);
        assert!(KernelModel::new(1.5, vec![1.0; 4], ang.clone(), 2.0, 1.0).is_err());
        assert!(KernelModel::new(0.0, vec![1.0, 2.0, 1.0, 1.0], ang.clone(), 2.0, 1.0).is_err());
        assert!(KernelModel::new(0.0, vec![1.0, 0.0, 0.0, 1.0], ang, 2.0, 1.0).is_err());
    }

    #[test]
    fn b2_margin_example() {
        let sphere = SphereRule::new(2, 16).unwrap();
        let m = linear(1.0, 0.01);
        let rep = validate_assumptions(&m, 1, 1.0, 1, &sphere).unwrap();
        assert!((rep.min_d() - 0.96).abs() < 1e-14);
        assert!(rep.all_pass());
        assert!(rep.pairs.iter().all(|p| p.overlap_lower.is_none_or(|h| h > 0.0)));

        let none = linear(0.3, 0.0);
        let rep = validate_assumptions(&none, 2, 1.0, 1, &sphere).unwrap();
        assert!((rep.min_d() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_angular_part_is_flagged() {
        let sphere = SphereRule::new(2, 8).unwrap();
        let mut b0 = vec![AngularCoeffs::constant(1.0); 4];
        b0[1] = AngularCoeffs { a: 0.2, c: 1.0 };
        let ang = AngularModel::new(AngularKind::LinearInZ, 2, b0, vec![AngularCoeffs::ZERO; 4]).unwrap();
        let m = KernelModel::new(0.0, vec![1.0; 4], ang, 2.0, 1.0).unwrap();
        let rep = validate_assumptions(&m, 0, 1.0, 1, &sphere).unwrap();
        assert!(rep.pairs[1].symmetry_residual > 0.0);
        assert!(!rep.pairs[1].symmetric());
        assert!(!rep.all_pass());
    }

    #[test]
    fn d_margin_shrinks_with_q_and_cz() {
        let sphere = SphereRule::new(2, 8).unwrap();
        let m = KernelModel::uniform(
            0.0,
            2,
            1.0,
            AngularKind::LinearInZ,
            AngularCoeffs { a: 0.4, c: 1.0 },
            AngularCoeffs { a: -0.1, c: 0.02 },
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for q in 0..5 {
            let d = validate_assumptions(&m, q, 1.0, 1, &sphere).unwrap().min_d();
            assert!(d <= last);
            last = d;
        }
        let mut last = f64::INFINITY;
        for cz in [0.25, 0.5, 1.0, 2.0] {
            let d = validate_assumptions(&m, 1, cz, 1, &sphere).unwrap().min_d();
            assert!(d <= last);
            last = d;
        }
    }
}
