//! Velocity lattice, species data, Maxwellian equilibria, moments and the
//! weighted norms used to measure perturbations.
//!
//! The lattice is the uniform midpoint grid of `[-R, R]^dim` with
//! `n_per_axis` cells per axis. Points sit at `-R + h (m + 1/2)` for integer
//! lattice coordinates `m`, so differences of points are integer multiples of
//! `h` and the point set is closed under `v -> -v`.

use std::f64::consts::PI;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Quadrature on the unit sphere `S^{dim-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRule {
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    /// Uniform-in-angle rule on the circle, or a Gauss(cos θ) × uniform(φ)
    /// product rule on the 2-sphere.
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid("angular_resolution", "must be at least 2"));
        }
        match dim {
            2 => {
                let w = 2.0 * PI / resolution as f64;
                let nodes = (0..resolution)
                    .map(|k| {
                        let a = 2.0 * PI * (k as f64 + 0.5) / resolution as f64;
                        [a.cos(), a.sin(), 0.0]
                    })
                    .collect();
                Ok(Self {
                    nodes,
                    weights: vec![w; resolution],
                })
            }
            3 => {
                let polar = gauss_legendre(resolution)?;
                let n_az = 2 * resolution;
                let w_az = 2.0 * PI / n_az as f64;
                let mut nodes = Vec::with_capacity(resolution * n_az);
                let mut weights = Vec::with_capacity(resolution * n_az);
                for (&ct, &wt) in polar.nodes.iter().zip(&polar.weights) {
                    let st = (1.0 - ct * ct).max(0.0).sqrt();
                    for k in 0..n_az {
                        let phi = 2.0 * PI * (k as f64 + 0.5) / n_az as f64;
                        nodes.push([st * phi.cos(), st * phi.sin(), ct]);
                        weights.push(wt * w_az);
                    }
                }
                Ok(Self { nodes, weights })
            }
            _ => Err(Error::invalid("dim", "velocity dimension must be 2 or 3")),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Surface area of `S^{dim-1}`.
pub fn sphere_area(dim: usize) -> f64 {
    match dim {
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => f64::NAN,
    }
}

/// Truncated uniform velocity lattice with midpoint quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    dim: usize,
    n_per_axis: usize,
    radius: f64,
    spacing: f64,
    points: Vec<[f64; 3]>,
    lattice: Vec<[i32; 3]>,
    bracket: Vec<f64>,
    angular: SphereRule,
}

impl VelocityGrid {
    pub fn new(dim: usize, n_per_axis: usize, radius: f64, angular_resolution: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid("dim", "velocity dimension must be 2 or 3"));
        }
        if n_per_axis < 4 {
            return Err(Error::invalid("n_per_axis", "must be at least 4"));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::invalid("radius", "must be positive and finite"));
        }
        let angular = SphereRule::new(dim, angular_resolution)?;
        let spacing = 2.0 * radius / n_per_axis as f64;
        let n = n_per_axis as i32;
        let total = n_per_axis.pow(dim as u32);
        let mut points = Vec::with_capacity(total);
        let mut lattice = Vec::with_capacity(total);
        for flat in 0..total {
            let mut m = [0i32; 3];
            let mut rest = flat as i32;
            for axis in (0..dim).rev() {
                m[axis] = rest % n;
                rest /= n;
            }
            let mut v = [0.0; 3];
            for axis in 0..dim {
                // (2m - n + 1) h / 2 keeps the point set exactly sign-closed
                v[axis] = 0.5 * spacing * (2 * m[axis] - n + 1) as f64;
            }
            points.push(v);
            lattice.push(m);
        }
        let bracket = points.iter().map(|v| (1.0 + norm2(v)).sqrt()).collect();
        Ok(Self {
            dim,
            n_per_axis,
            radius,
            spacing,
            points,
            lattice,
            bracket,
            angular,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Lattice spacing `h = 2R / n_per_axis`.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, p: usize) -> &[f64; 3] {
        &self.points[p]
    }

    pub fn lattice(&self) -> &[[i32; 3]] {
        &self.lattice
    }

    /// Uniform quadrature weight `h^dim` carried by every point.
    pub fn weight(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![self.weight(); self.len()]
    }

    /// `<v> = sqrt(1 + |v|^2)` at every point.
    pub fn brackets(&self) -> &[f64] {
        &self.bracket
    }

    pub fn angular(&self) -> &SphereRule {
        &self.angular
    }

    /// Flat index of lattice coordinates, or `None` outside the box.
    pub fn index_of(&self, m: &[i32; 3]) -> Option<usize> {
        let n = self.n_per_axis as i32;
        let mut flat = 0usize;
        for &c in m.iter().take(self.dim) {
            if c < 0 || c >= n {
                return None;
            }
            flat = flat * self.n_per_axis + c as usize;
        }
        Some(flat)
    }

    /// Index of `-v`.
    pub fn mirror(&self, p: usize) -> usize {
        let n = self.n_per_axis as i32;
        let mut m = self.lattice[p];
        for c in m.iter_mut().take(self.dim) {
            *c = n - 1 - *c;
        }
        self.index_of(&m).expect("lattice is sign-closed")
    }

    /// Same dimension, resolution and radius.
    pub fn same_as(&self, other: &VelocityGrid) -> bool {
        self.dim == other.dim && self.n_per_axis == other.n_per_axis && self.radius == other.radius
    }
}

pub(crate) fn norm2(v: &[f64; 3]) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

/// The species composing the mixture and their equilibrium masses.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesSet {
    c_inf: Vec<f64>,
}

impl SpeciesSet {
    /// A mixture of at least two species with positive equilibrium masses.
    pub fn new(c_inf: Vec<f64>) -> Result<Self> {
        if c_inf.len() < 2 {
            return Err(Error::invalid("c_inf", "a mixture needs at least two species"));
        }
        Self::checked(c_inf)
    }

    /// A single-species set, used only to check reductions of mixture
    /// formulas to the one-species case.
    pub fn single_species(c_inf: f64) -> Result<Self> {
        Self::checked(vec![c_inf])
    }

    fn checked(c_inf: Vec<f64>) -> Result<Self> {
        if c_inf.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("c_inf", "equilibrium masses must be positive"));
        }
        Ok(Self { c_inf })
    }

    pub fn len(&self) -> usize {
        self.c_inf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_inf.is_empty()
    }

    pub fn c_inf(&self) -> &[f64] {
        &self.c_inf
    }
}

/// Per-species values on the lattice, stored species-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesField {
    n_species: usize,
    n_points: usize,
    values: Vec<f64>,
    pub label: String,
}

impl SpeciesField {
    pub fn zeros(n_species: usize, n_points: usize) -> Self {
        Self {
            n_species,
            n_points,
            values: vec![0.0; n_species * n_points],
            label: String::new(),
        }
    }

    pub fn from_values(n_species: usize, n_points: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_species * n_points {
            return Err(Error::Mismatch(format!("{} values for {n_species} species x {n_points} points", values.len())));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("values", "field entries must be finite"));
        }
        Ok(Self {
            n_species,
            n_points,
            values,
            label: String::new(),
        })
    }

    pub fn from_fn(grid: &VelocityGrid, n_species: usize, mut f: impl FnMut(usize, &[f64; 3]) -> f64) -> Self {
        let mut out = Self::zeros(n_species, grid.len());
        for i in 0..n_species {
            for (p, v) in grid.points().iter().enumerate() {
                out.values[i * grid.len() + p] = f(i, v);
            }
        }
        out
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn species(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_points..(i + 1) * self.n_points]
    }

    pub fn species_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.n_points..(i + 1) * self.n_points]
    }

    pub fn get(&self, i: usize, p: usize) -> f64 {
        self.values[i * self.n_points + p]
    }

    pub fn set(&mut self, i: usize, p: usize, x: f64) {
        self.values[i * self.n_points + p] = x;
    }

    pub fn same_shape(&self, other: &SpeciesField) -> bool {
        self.n_species == other.n_species && self.n_points == other.n_points
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &SpeciesField) {
        debug_assert!(self.same_shape(other));
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|x| *x *= a);
    }

    pub fn scaled(&self, a: f64) -> SpeciesField {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn sub(&self, other: &SpeciesField) -> SpeciesField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &SpeciesField) -> SpeciesField {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    /// Pointwise product, species by species.
    pub fn mul(&self, other: &SpeciesField) -> SpeciesField {
        let mut out = self.clone();
        for (x, y) in out.values.iter_mut().zip(&other.values) {
            *x *= y;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Discrete `L^2_v` inner product `sum_i sum_p w_p f_i g_i`.
    pub fn dot(&self, other: &SpeciesField, grid: &VelocityGrid) -> f64 {
        grid.weight() * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// `M_i(v) = c_i (2π)^{-dim/2} exp(-|v|^2 / 2)`.
pub fn maxwellian(grid: &VelocityGrid, species: &SpeciesSet) -> SpeciesField {
    let norm = (2.0 * PI).powf(-(grid.dim() as f64) / 2.0);
    SpeciesField::from_fn(grid, species.len(), |i, v| species.c_inf()[i] * norm * (-0.5 * norm2(v)).exp()).with_label("maxwellian")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub mass_per_species: Vec<f64>,
    pub total_momentum: Vec<f64>,
    pub total_energy: f64,
}

impl MomentReport {
    /// All invariant moments flattened as (masses, momentum, energy).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.mass_per_species.clone();
        out.extend_from_slice(&self.total_momentum);
        out.push(self.total_energy);
        out
    }
}

/// Discrete mass, momentum and energy. Summation runs in a fixed order.
pub fn moments(grid: &VelocityGrid, field: &SpeciesField) -> MomentReport {
    let w = grid.weight();
    let dim = grid.dim();
    let mut mass = vec![0.0; field.n_species()];
    let mut momentum = vec![0.0; dim];
    let mut energy = 0.0;
    for (i, m) in mass.iter_mut().enumerate() {
        let fi = field.species(i);
        let mut mi = 0.0;
        for (p, v) in grid.points().iter().enumerate() {
            mi += fi[p];
            for a in 0..dim {
                momentum[a] += w * v[a] * fi[p];
            }
            energy += 0.5 * w * norm2(v) * fi[p];
        }
        *m = w * mi;
    }
    MomentReport {
        mass_per_species: mass,
        total_momentum: momentum,
        total_energy: energy,
    }
}

/// Weight structure of a velocity norm. Every kind also carries the
/// polynomial weight `<v>^k` passed to [`weighted_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormKind<'a> {
    /// `sum_i sum_p w_p |f_i| <v>^k`
    L1Poly,
    /// `sqrt(sum_i sum_p w_p (f_i <v>^k)^2)`
    L2,
    /// Λ-norm: `sqrt(sum_i sum_p w_p f_i^2 <v>^{2k + gamma})`
    L2Lambda { gamma: f64 },
    /// `sqrt(sum_i sum_p w_p (f_i <v>^k)^2 / M_i)`
    L2InvMaxwellian { maxwellian: &'a SpeciesField },
    /// `sum_i sum_p w_p |f_i| <v>^k nu_i`; the collision frequency is required.
    L1PolyNu { nu: Option<&'a SpeciesField> },
    /// `sum_i sup_p |f_i| <v>^k M_i^{-1/2}`
    LinfPolyInvSqrtM { maxwellian: &'a SpeciesField },
}

pub fn weighted_norm(grid: &VelocityGrid, field: &SpeciesField, k: f64, kind: NormKind<'_>) -> Result<f64> {
    if !(k >= 0.0) {
        return Err(Error::invalid("weight_exponent", "must be non-negative"));
    }
    if field.n_points() != grid.len() {
        return Err(Error::Mismatch("field is not defined on this grid".into()));
    }
    let w = grid.weight();
    let br = grid.brackets();
    let pw: Vec<f64> = br.iter().map(|b| b.powf(k)).collect();
    let check = |other: &SpeciesField| -> Result<()> {
        if other.same_shape(field) {
            Ok(())
        } else {
            Err(Error::Mismatch("weight field has the wrong shape".into()))
        }
    };
    let mut acc = 0.0;
    match kind {
        NormKind::L1Poly => {
            for i in 0..field.n_species() {
                for (p, x) in field.species(i).iter().enumerate() {
                    acc += x.abs() * pw[p];
                }
            }
            Ok(w * acc)
        }
        NormKind::L2 => {
            for i in 0..field.n_species() {
                for (p, x) in field.species(i).iter().enumerate() {
                    acc += (x * pw[p]).powi(2);
                }
            }
            Ok((w * acc).sqrt())
        }
        NormKind::L2Lambda { gamma } => {
            for i in 0..field.n_species() {
                for (p, x) in field.species(i).iter().enumerate() {
                    acc += (x * pw[p]).powi(2) * br[p].powf(gamma);
                }
            }
            Ok((w * acc).sqrt())
        }
        NormKind::L2InvMaxwellian { maxwellian } => {
            check(maxwellian)?;
            for i in 0..field.n_species() {
                let m = maxwellian.species(i);
                for (p, x) in field.species(i).iter().enumerate() {
                    acc += (x * pw[p]).powi(2) / m[p];
                }
            }
            Ok((w * acc).sqrt())
        }
        NormKind::L1PolyNu { nu } => {
            let nu = nu.ok_or_else(|| Error::invalid("nu", "the L1 nu-weighted norm needs a collision frequency"))?;
            check(nu)?;
            for i in 0..field.n_species() {
                let n = nu.species(i);
                for (p, x) in field.species(i).iter().enumerate() {
                    acc += x.abs() * pw[p] * n[p];
                }
            }
            Ok(w * acc)
        }
        NormKind::LinfPolyInvSqrtM { maxwellian } => {
            check(maxwellian)?;
            for i in 0..field.n_species() {
                let m = maxwellian.species(i);
                let sup = field
                    .species(i)
                    .iter()
                    .enumerate()
                    .fold(0.0f64, |s, (p, x)| s.max(x.abs() * pw[p] / m[p].sqrt()));
                acc += sup;
            }
            Ok(acc)
        }
    }
}

/// Which perturbation variable a field or operator refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbationForm {
    /// `F = M + f`; the Hilbert structure is `L^2(M^{-1/2})`.
    #[default]
    Additive,
    /// `F = M + M^{1/2} f`; the Hilbert structure is plain `L^2_v`.
    SqrtWeighted,
}

/// The discrete collision invariants `e_i`, `v_a`, `|v|^2`.
pub fn collision_invariants(grid: &VelocityGrid, n_species: usize) -> Vec<SpeciesField> {
    let mut out = Vec::with_capacity(n_species + grid.dim() + 1);
    for s in 0..n_species {
        out.push(SpeciesField::from_fn(grid, n_species, |i, _| if i == s { 1.0 } else { 0.0 }));
    }
    for a in 0..grid.dim() {
        out.push(SpeciesField::from_fn(grid, n_species, |_, v| v[a]));
    }
    out.push(SpeciesField::from_fn(grid, n_species, |_, v| norm2(v)));
    out
}

/// Orthogonal projection onto the span of the collision invariants in the
/// Hilbert structure that goes with a perturbation form.
#[derive(Debug, Clone)]
pub struct InvariantProjector {
    /// Kernel directions: `M φ` (additive) or `M^{1/2} φ` (sqrt-weighted).
    directions: Vec<SpeciesField>,
    /// Pointwise inner-product weight: `1 / M` or `1`.
    inner: SpeciesField,
    gram: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    weight: f64,
}

impl InvariantProjector {
    pub fn new(grid: &VelocityGrid, species: &SpeciesSet, form: PerturbationForm) -> Result<Self> {
        let m = maxwellian(grid, species);
        let n = species.len();
        let phis = collision_invariants(grid, n);
        let (directions, inner): (Vec<SpeciesField>, SpeciesField) = match form {
            PerturbationForm::Additive => {
                let inv = SpeciesField::from_values(n, grid.len(), m.as_slice().iter().map(|x| 1.0 / x).collect())?;
                (phis.iter().map(|phi| phi.mul(&m)).collect(), inv)
            }
            PerturbationForm::SqrtWeighted => {
                let sqrt = SpeciesField::from_values(n, grid.len(), m.as_slice().iter().map(|x| x.sqrt()).collect())?;
                let ones = SpeciesField::from_values(n, grid.len(), vec![1.0; n * grid.len()])?;
                (phis.iter().map(|phi| phi.mul(&sqrt)).collect(), ones)
            }
        };
        let k = directions.len();
        let weight = grid.weight();
        let mut g = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in 0..=a {
                let val = weighted_dot(&directions[a], &directions[b], &inner) * weight;
                g[(a, b)] = val;
                g[(b, a)] = val;
            }
        }
        // Reject near-singular Gram matrices relative to their scale.
        let scale = (0..k).map(|a| g[(a, a)]).fold(0.0f64, f64::max);
        let eig = g.clone().symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 1e-12 * scale) {
            return Err(Error::SingularGram);
        }
        let gram = g.cholesky().ok_or(Error::SingularGram)?;
        Ok(Self {
            directions,
            inner,
            gram,
            weight,
        })
    }

    pub fn rank(&self) -> usize {
        self.directions.len()
    }

    pub fn directions(&self) -> &[SpeciesField] {
        &self.directions
    }

    /// Coefficients of the projection in the kernel directions.
    pub fn coefficients(&self, f: &SpeciesField) -> Vec<f64> {
        let rhs = DVector::from_iterator(
            self.directions.len(),
            self.directions.iter().map(|d| weighted_dot(d, f, &self.inner) * self.weight),
        );
        self.gram.solve(&rhs).iter().cloned().collect()
    }

    /// `Π f`
    pub fn project(&self, f: &SpeciesField) -> SpeciesField {
        let c = self.coefficients(f);
        let mut out = SpeciesField::zeros(f.n_species(), f.n_points());
        for (d, ck) in self.directions.iter().zip(c) {
            out.axpy(ck, d);
        }
        out
    }

    /// `(I - Π) f`
    pub fn complement(&self, f: &SpeciesField) -> SpeciesField {
        f.sub(&self.project(f))
    }
}

fn weighted_dot(a: &SpeciesField, b: &SpeciesField, w: &SpeciesField) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).zip(w.as_slice()).map(|((x, y), z)| x * y * z).sum()
}

/// Writes a field as CSV rows `species,point_index,vx,vy[,vz],value`.
pub fn write_field_csv<W: Write>(grid: &VelocityGrid, field: &SpeciesField, mut out: W) -> io::Result<()> {
    if grid.dim() == 2 {
        writeln!(out, "species,point_index,vx,vy,value")?;
    } else {
        writeln!(out, "species,point_index,vx,vy,vz,value")?;
    }
    for i in 0..field.n_species() {
        for (p, v) in grid.points().iter().enumerate() {
            write!(out, "{i},{p}")?;
            for c in v.iter().take(grid.dim()) {
                write!(out, ",{c}")?;
            }
            writeln!(out, ",{}", field.get(i, p))?;
        }
    }
    Ok(())
}
