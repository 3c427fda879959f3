//! Orthonormal polynomial chaos in one random variable, the Galerkin
//! coupling of the linearized operator, and the weighted quadratic form of
//! the stochastic Galerkin operator ("Term I") computed by three routes.

use nalgebra::DMatrix;

use crate::collision::{CollisionWorkspace, KernelTable};
use crate::error::{Error, Result};
use crate::grid::{maxwellian, InvariantProjector, PerturbationForm, SpeciesField, SpeciesSet, VelocityGrid};
use crate::kernel::{d_from, sin_cos, speed_factor, KernelMix, KernelModel};
use crate::linop::{assemble_linearized, AssembledOperator, LinearOperator, DENSE_LIMIT};
use crate::quadrature::{gauss_from_recurrence, GaussRule};

/// Probability measure of the random parameter `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measure {
    /// Uniform on `[-c_z, c_z]`.
    Uniform { c_z: f64 },
    /// Density `∝ (1 - x)^alpha (1 + x)^beta` of `x = z / c_z` on `[-1, 1]`.
    Beta { alpha: f64, beta: f64, c_z: f64 },
}

impl Measure {
    pub fn c_z(&self) -> f64 {
        match *self {
            Measure::Uniform { c_z } | Measure::Beta { c_z, .. } => c_z,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match *self {
            Measure::Uniform { .. } => true,
            Measure::Beta { alpha, beta, .. } => alpha == beta,
        }
    }

    fn exponents(&self) -> (f64, f64) {
        match *self {
            Measure::Uniform { .. } => (0.0, 0.0),
            Measure::Beta { alpha, beta, .. } => (alpha, beta),
        }
    }

    /// Monic recurrence `(a_k, b_k)`, `k < n`, with `b_0 = 1`.
    pub fn recurrence(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let c_z = self.c_z();
        if !(c_z > 0.0) || !c_z.is_finite() {
            return Err(Error::DegenerateMeasure("support half-width must be positive".into()));
        }
        let (al, be) = self.exponents();
        if !(al > -1.0 && be > -1.0) {
            return Err(Error::DegenerateMeasure("Jacobi exponents must exceed -1".into()));
        }
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let s = al + be;
        for k in 0..n {
            let kf = k as f64;
            let ak = if k == 0 {
                (be - al) / (s + 2.0)
            } else {
                (be * be - al * al) / ((2.0 * kf + s) * (2.0 * kf + s + 2.0))
            };
            let bk = match k {
                0 => 1.0,
                1 => 4.0 * (1.0 + al) * (1.0 + be) / ((2.0 + s).powi(2) * (3.0 + s)),
                _ => {
                    let t = 2.0 * kf + s;
                    4.0 * kf * (kf + al) * (kf + be) * (kf + s) / (t * t * (t + 1.0) * (t - 1.0))
                }
            };
            a.push(c_z * ak);
            b.push(if k == 0 { 1.0 } else { c_z * c_z * bk });
        }
        Ok((a, b))
    }
}

/// Orthonormal polynomials `ψ_1 = 1, ψ_2, …, ψ_K` of a measure.
#[derive(Debug, Clone)]
pub struct GpcBasis {
    k: usize,
    measure: Measure,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    jacobi: DMatrix<f64>,
    quad: GaussRule,
}

/// Orthonormal basis with `K` modes and a `(2K + 4)`-point Gauss rule.
pub fn build_basis(measure: Measure, k: usize) -> Result<GpcBasis> {
    if k == 0 {
        return Err(Error::invalid("K", "at least one mode is required"));
    }
    let nq = 2 * k + 4;
    let (alpha, beta) = measure.recurrence(nq.max(k + 1))?;
    let quad = gauss_from_recurrence(&alpha, &beta, nq)?;
    let jacobi = DMatrix::from_fn(k, k, |r, c| {
        if r == c {
            alpha[r]
        } else if r + 1 == c {
            beta[c].sqrt()
        } else if c + 1 == r {
            beta[r].sqrt()
        } else {
            0.0
        }
    });
    Ok(GpcBasis {
        k,
        measure,
        alpha,
        beta,
        jacobi,
        quad,
    })
}

impl GpcBasis {
    pub fn n_modes(&self) -> usize {
        self.k
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    /// `J_kj = ∫ z ψ_k ψ_j dπ`
    pub fn jacobi(&self) -> &DMatrix<f64> {
        &self.jacobi
    }

    pub fn quadrature(&self) -> &GaussRule {
        &self.quad
    }

    /// `ψ_1(z), …, ψ_K(z)` (index 0 holds the constant mode).
    pub fn eval(&self, z: f64) -> Vec<f64> {
        self.eval_n(z, self.k)
    }

    fn eval_n(&self, z: f64, n: usize) -> Vec<f64> {
        let mut psi = Vec::with_capacity(n);
        psi.push(1.0);
        if n > 1 {
            psi.push((z - self.alpha[0]) / self.beta[1].sqrt());
        }
        for m in 2..n {
            let next = ((z - self.alpha[m - 1]) * psi[m - 1] - self.beta[m - 1].sqrt() * psi[m - 2]) / self.beta[m].sqrt();
            psi.push(next);
        }
        psi
    }

    /// Mean of `z` under the measure (`∫ z dπ = J_11`).
    pub fn mean(&self) -> f64 {
        self.alpha[0]
    }

    /// `c_k = ∫ g ψ_k dπ` from samples of `g` at the quadrature nodes.
    pub fn project_function(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.len() != self.quad.len() {
            return Err(Error::Mismatch(format!("{} samples for {} quadrature nodes", samples.len(), self.quad.len())));
        }
        let mut c = vec![0.0; self.k];
        for ((z, w), g) in self.quad.nodes.iter().zip(&self.quad.weights).zip(samples) {
            for (ck, pk) in c.iter_mut().zip(self.eval(*z)) {
                *ck += w * g * pk;
            }
        }
        Ok(c)
    }

    /// `Σ_k c_k ψ_k(z)`
    pub fn reconstruct(&self, coeffs: &[f64], z: f64) -> f64 {
        coeffs.iter().zip(self.eval(z)).map(|(c, p)| c * p).sum()
    }

    /// `∫ g ψ_k ψ_j dπ` by the basis quadrature.
    pub fn triple_matrix(&self, mut g: impl FnMut(f64) -> f64) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.k, self.k);
        for (z, w) in self.quad.nodes.iter().zip(&self.quad.weights) {
            let psi = self.eval(*z);
            let gz = g(*z);
            for r in 0..self.k {
                for c in 0..self.k {
                    m[(r, c)] += w * gz * psi[r] * psi[c];
                }
            }
        }
        m
    }

    /// `max_{k,j} |∫ ψ_k ψ_j dπ - δ_kj|` by quadrature.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.triple_matrix(|_| 1.0);
        (g - DMatrix::identity(self.k, self.k)).abs().max()
    }
}

/// Coefficient fields `f_{i,k}(v_p)`, ordered species, mode, point.
#[derive(Debug, Clone, PartialEq)]
pub struct GpcField {
    n_species: usize,
    n_modes: usize,
    n_points: usize,
    coeffs: Vec<f64>,
}

impl GpcField {
    pub fn zeros(n_species: usize, n_modes: usize, n_points: usize) -> Self {
        Self {
            n_species,
            n_modes,
            n_points,
            coeffs: vec![0.0; n_species * n_modes * n_points],
        }
    }

    pub fn from_values(n_species: usize, n_modes: usize, n_points: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != n_species * n_modes * n_points {
            return Err(Error::Mismatch("coefficient count does not match the shape".into()));
        }
        if coeffs.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("coeffs", "entries must be finite"));
        }
        Ok(Self {
            n_species,
            n_modes,
            n_points,
            coeffs,
        })
    }

    /// Builds the field from one [`SpeciesField`] per mode.
    pub fn from_modes(modes: &[SpeciesField]) -> Result<Self> {
        let first = modes.first().ok_or_else(|| Error::invalid("modes", "need at least one mode"))?;
        let (n, np) = (first.n_species(), first.n_points());
        let mut out = Self::zeros(n, modes.len(), np);
        for (k, m) in modes.iter().enumerate() {
            if !m.same_shape(first) {
                return Err(Error::Mismatch("modes have different shapes".into()));
            }
            for i in 0..n {
                out.mode_mut(i, k).copy_from_slice(m.species(i));
            }
        }
        Ok(out)
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    fn offset(&self, i: usize, k: usize) -> usize {
        (i * self.n_modes + k) * self.n_points
    }

    pub fn mode_slice(&self, i: usize, k: usize) -> &[f64] {
        let o = self.offset(i, k);
        &self.coeffs[o..o + self.n_points]
    }

    pub fn mode_mut(&mut self, i: usize, k: usize) -> &mut [f64] {
        let o = self.offset(i, k);
        &mut self.coeffs[o..o + self.n_points]
    }

    /// Mode `k` (0-based) of every species.
    pub fn mode(&self, k: usize) -> SpeciesField {
        let mut out = SpeciesField::zeros(self.n_species, self.n_points);
        for i in 0..self.n_species {
            out.species_mut(i).copy_from_slice(self.mode_slice(i, k));
        }
        out
    }

    pub fn set_mode(&mut self, k: usize, f: &SpeciesField) {
        for i in 0..self.n_species {
            self.mode_mut(i, k).copy_from_slice(f.species(i));
        }
    }

    /// `f^K(z) = Σ_k f_k ψ_k(z)`
    pub fn evaluate(&self, basis: &GpcBasis, z: f64) -> SpeciesField {
        let psi = basis.eval(z);
        let mut out = SpeciesField::zeros(self.n_species, self.n_points);
        for (k, pk) in psi.iter().enumerate().take(self.n_modes) {
            out.axpy(*pk, &self.mode(k));
        }
        out
    }

    /// Galerkin projection of one field per quadrature node.
    pub fn project(basis: &GpcBasis, node_fields: &[SpeciesField]) -> Result<Self> {
        let quad = basis.quadrature();
        if node_fields.len() != quad.len() {
            return Err(Error::Mismatch(format!(
                "{} node fields for {} quadrature nodes",
                node_fields.len(),
                quad.len()
            )));
        }
        let first = &node_fields[0];
        let mut modes = vec![SpeciesField::zeros(first.n_species(), first.n_points()); basis.n_modes()];
        for ((z, w), f) in quad.nodes.iter().zip(&quad.weights).zip(node_fields) {
            for (m, pk) in modes.iter_mut().zip(basis.eval(*z)) {
                m.axpy(w * pk, f);
            }
        }
        Self::from_modes(&modes)
    }

    pub fn axpy(&mut self, a: f64, other: &GpcField) {
        for (x, y) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *x += a * y;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Galerkin angular tensor `S̃_{i,l,k,j} = b0_il δ_kj + b1_il C_kj`, stored as
/// the coupling matrix `C_kj = ∫ φ ψ_k ψ_j dπ`.
#[derive(Debug, Clone, PartialEq)]
pub struct STensor {
    pub coupling: DMatrix<f64>,
}

impl STensor {
    /// `S̃_{i,l,k,j}(cos θ)`
    pub fn entry(&self, model: &KernelModel, i: usize, l: usize, k: usize, j: usize, cos_theta: f64) -> f64 {
        let delta = if k == j { 1.0 } else { 0.0 };
        model.angular.b0(i, l).eval(cos_theta) * delta + model.angular.b1(i, l).eval(cos_theta) * self.coupling[(k, j)]
    }
}

/// For linear kernels the coupling is the Jacobi matrix; otherwise it is
/// integrated by the basis quadrature.
pub fn assemble_s_tensor(basis: &GpcBasis, model: &KernelModel) -> STensor {
    let coupling = if model.angular.is_linear() {
        basis.jacobi().clone()
    } else {
        basis.triple_matrix(|z| model.angular.phi(z, 0))
    };
    STensor { coupling }
}

/// `∫ b_il(cos θ, z) ψ_k ψ_j dπ` for every `(k, j)`, by direct z-quadrature
/// of the kernel.
pub fn s_tensor_by_quadrature(basis: &GpcBasis, model: &KernelModel, i: usize, l: usize, cos_theta: f64) -> Result<DMatrix<f64>> {
    let mut err = None;
    let m = basis.triple_matrix(|z| match model.eval_b(i, l, cos_theta, z, 0) {
        Ok(b) => b,
        Err(e) => {
            err = Some(e);
            0.0
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(m),
    }
}

/// The stochastic Galerkin linearized operator, stored through its two
/// angular components. [`SgOperator::new`] uses the sqrt-weighted form.
#[derive(Debug, Clone)]
pub struct SgOperator {
    /// `L̃[b0]`
    pub l0: AssembledOperator,
    /// `L̃[b1]`
    pub l1: AssembledOperator,
    pub coupling: DMatrix<f64>,
    pub n_species: usize,
    pub n_modes: usize,
    pub n_points: usize,
}

impl SgOperator {
    pub fn new(ws: &CollisionWorkspace, model: &KernelModel, basis: &GpcBasis, species: &SpeciesSet) -> Result<Self> {
        Self::with_form(ws, model, basis, species, PerturbationForm::SqrtWeighted)
    }

    /// Same coupling with `L0`, `L1` linearized in the given perturbation form.
    pub fn with_form(ws: &CollisionWorkspace, model: &KernelModel, basis: &GpcBasis, species: &SpeciesSet, form: PerturbationForm) -> Result<Self> {
        model.check_species(species)?;
        let t0 = KernelTable::new(ws, model, KernelMix::B0);
        let t1 = KernelTable::new(ws, model, KernelMix::B1);
        let l0 = assemble_linearized(ws, &t0, species, form)?;
        let l1 = assemble_linearized(ws, &t1, species, form)?;
        Ok(Self {
            l0,
            l1,
            coupling: assemble_s_tensor(basis, model).coupling,
            n_species: species.len(),
            n_modes: basis.n_modes(),
            n_points: ws.grid().len(),
        })
    }

    pub fn size(&self) -> usize {
        self.n_species * self.n_modes * self.n_points
    }

    /// Block `(k, j)` acting between modes, on (species × point) unknowns.
    pub fn block(&self, k: usize, j: usize) -> DMatrix<f64> {
        let mut b = &self.l1.matrix * self.coupling[(k, j)];
        if k == j {
            b += &self.l0.matrix;
        }
        b
    }

    pub fn apply(&self, f: &GpcField) -> Result<GpcField> {
        if f.n_species() != self.n_species || f.n_modes() != self.n_modes || f.n_points() != self.n_points {
            return Err(Error::Mismatch("gPC field shape differs from the operator".into()));
        }
        let modes: Vec<SpeciesField> = (0..self.n_modes).map(|k| f.mode(k)).collect();
        let a0: Vec<SpeciesField> = modes.iter().map(|m| self.l0.apply_field(m)).collect::<Result<_>>()?;
        let a1: Vec<SpeciesField> = modes.iter().map(|m| self.l1.apply_field(m)).collect::<Result<_>>()?;
        let mut out = GpcField::zeros(self.n_species, self.n_modes, self.n_points);
        for k in 0..self.n_modes {
            let mut acc = a0[k].clone();
            for (j, aj) in a1.iter().enumerate() {
                let c = self.coupling[(k, j)];
                if c != 0.0 {
                    acc.axpy(c, aj);
                }
            }
            out.set_mode(k, &acc);
        }
        Ok(out)
    }

    /// Dense assembly, refused above [`DENSE_LIMIT`] unknowns.
    pub fn to_dense(&self) -> Result<AssembledOperator> {
        let size = self.size();
        if size > DENSE_LIMIT {
            return Err(Error::TooLarge { size, limit: DENSE_LIMIT });
        }
        let (n, kk, np) = (self.n_species, self.n_modes, self.n_points);
        let mut m = DMatrix::zeros(size, size);
        for k in 0..kk {
            for j in 0..kk {
                let c = self.coupling[(k, j)];
                if k != j && c == 0.0 {
                    continue;
                }
                for i in 0..n {
                    for l in 0..n {
                        for p in 0..np {
                            for q in 0..np {
                                let mut x = c * self.l1.matrix[(i * np + p, l * np + q)];
                                if k == j {
                                    x += self.l0.matrix[(i * np + p, l * np + q)];
                                }
                                m[((i * kk + k) * np + p, (l * kk + j) * np + q)] = x;
                            }
                        }
                    }
                }
            }
        }
        Ok(AssembledOperator {
            matrix: m,
            n_species: n,
            n_modes: kk,
            n_points: np,
            inner: self.l0.inner,
            maxwellian: self.l0.maxwellian.as_ref().map(|m| {
                let mut out = Vec::with_capacity(size);
                for i in 0..n {
                    for _ in 0..kk {
                        out.extend_from_slice(&m[i * np..(i + 1) * np]);
                    }
                }
                out
            }),
        })
    }
}

impl LinearOperator for SgOperator {
    fn dim(&self) -> usize {
        self.size()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let f = GpcField::from_values(self.n_species, self.n_modes, self.n_points, x.to_vec()).expect("sized input");
        y.copy_from_slice(self.apply(&f).expect("sized").as_slice());
    }
}

/// Dense SG operator of `L(f^K)` projected on `ψ_k`.
pub fn assemble_sg_operator(ws: &CollisionWorkspace, model: &KernelModel, basis: &GpcBasis, species: &SpeciesSet) -> Result<AssembledOperator> {
    SgOperator::new(ws, model, basis, species)?.to_dense()
}

/// Everything the Term I routes share.
pub struct TermIContext<'a> {
    ws: &'a CollisionWorkspace,
    model: &'a KernelModel,
    sg: SgOperator,
    k0: KernelTable,
    k1: KernelTable,
    m: SpeciesField,
    sqrt_m: Vec<f64>,
    projector: InvariantProjector,
    c_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermIReport {
    pub value: f64,
    /// `Σ_{i,k} k^{2q} ‖f_{i,k}‖²_Λ`
    pub lambda_weighted_norm: f64,
    /// `-value / lambda_weighted_norm`; `None` for a zero field.
    pub ratio: Option<f64>,
}

impl<'a> TermIContext<'a> {
    pub fn new(ws: &'a CollisionWorkspace, model: &'a KernelModel, basis: &GpcBasis, species: &SpeciesSet) -> Result<Self> {
        let sg = SgOperator::new(ws, model, basis, species)?;
        let m = maxwellian(ws.grid(), species);
        let sqrt_m = m.as_slice().iter().map(|x| x.sqrt()).collect();
        Ok(Self {
            ws,
            model,
            sg,
            k0: KernelTable::new(ws, model, KernelMix::B0),
            k1: KernelTable::new(ws, model, KernelMix::B1),
            m,
            sqrt_m,
            projector: InvariantProjector::new(ws.grid(), species, PerturbationForm::SqrtWeighted)?,
            c_z: basis.measure().c_z(),
        })
    }

    pub fn sg(&self) -> &SgOperator {
        &self.sg
    }

    fn grid(&self) -> &VelocityGrid {
        self.ws.grid()
    }

    /// `(I - Π_G)` applied to every mode.
    pub fn microscopic(&self, f: &GpcField) -> GpcField {
        let mut out = f.clone();
        for k in 0..f.n_modes() {
            out.set_mode(k, &self.projector.complement(&f.mode(k)));
        }
        out
    }

    fn check(&self, f: &GpcField) -> Result<()> {
        if f.n_species() != self.sg.n_species || f.n_modes() != self.sg.n_modes || f.n_points() != self.sg.n_points {
            return Err(Error::Mismatch("gPC field shape differs from the context".into()));
        }
        Ok(())
    }

    /// `Σ_{i,k} k^{2q} ‖f_{i,k}‖²_Λ` with `‖g‖²_Λ = Σ_p w_p g² ⟨v_p⟩^γ`.
    pub fn lambda_weighted_norm(&self, f: &GpcField, q: u32) -> f64 {
        let w = self.grid().weight();
        let br: Vec<f64> = self.grid().brackets().iter().map(|b| b.powf(self.model.gamma())).collect();
        let mut acc = 0.0;
        for i in 0..f.n_species() {
            for k in 0..f.n_modes() {
                let kw = mode_weight(k, q);
                let s: f64 = f.mode_slice(i, k).iter().zip(&br).map(|(x, b)| x * x * b).sum();
                acc += kw * w * s;
            }
        }
        acc
    }

    /// Direct Galerkin pairing `Σ_{i,k} k^{2q} ⟨(SG f)_{i,k}, f_{i,k}⟩`
    /// on the microscopic part of `f`.
    pub fn term_i(&self, f: &GpcField, q: u32) -> Result<TermIReport> {
        self.check(f)?;
        let f = self.microscopic(f);
        let lf = self.sg.apply(&f)?;
        let w = self.grid().weight();
        let mut value = 0.0;
        for i in 0..f.n_species() {
            for k in 0..f.n_modes() {
                let s: f64 = lf.mode_slice(i, k).iter().zip(f.mode_slice(i, k)).map(|(a, b)| a * b).sum();
                value += mode_weight(k, q) * w * s;
            }
        }
        let norm = self.lambda_weighted_norm(&f, q);
        Ok(TermIReport {
            value,
            lambda_weighted_norm: norm,
            ratio: (norm > 0.0).then(|| -value / norm),
        })
    }

    /// `H = f / M^{1/2}` per mode, species-major with the mode index inside.
    fn h_values(&self, f: &GpcField) -> Vec<f64> {
        let (n, kk, np) = (f.n_species(), f.n_modes(), f.n_points());
        let mut h = vec![0.0; n * kk * np];
        for i in 0..n {
            for k in 0..kk {
                for (p, x) in f.mode_slice(i, k).iter().enumerate() {
                    h[(i * kk + k) * np + p] = x / self.sqrt_m[i * np + p];
                }
            }
        }
        h
    }

    /// Sum over collisions of `weight(c, i, l) · Σ_{k,j} coef · Δ_j Δ_k`,
    /// where `Δ_k = H_{i,k}(v') + H_{l,k}(v'*) - H_{i,k}(v) - H_{l,k}(v*)`.
    fn collision_sum(&self, h: &[f64], kk: usize, per_collision: impl Fn(usize, usize, usize, &[f64]) -> f64 + Sync) -> f64 {
        use rayon::prelude::*;
        let n = self.sg.n_species;
        let np = self.sg.n_points;
        let w = self.grid().weight();
        let sum: f64 = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut delta = vec![0.0; kk];
                let mut acc = 0.0;
                for c in self.ws.range(p) {
                    let col = &self.ws.collisions()[c];
                    let (q, pp, qq) = (col.q as usize, col.pp as usize, col.qq as usize);
                    for i in 0..n {
                        for l in 0..n {
                            for (k, d) in delta.iter_mut().enumerate() {
                                let hi = (i * kk + k) * np;
                                let hl = (l * kk + k) * np;
                                *d = h[hi + pp] + h[hl + qq] - h[hi + p] - h[hl + q];
                            }
                            let mm = self.m.get(i, p) * self.m.get(l, q);
                            acc += mm * per_collision(c, i, l, &delta);
                        }
                    }
                }
                acc
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        -0.25 * w * sum
    }

    /// Term I through the symmetrized form
    /// `-¼ Σ_{k,j} k^{2q} ∫ B[S̃_kj] M_i M*_l Δ[h_j] Δ[h_k]`.
    pub fn symmetrized(&self, f: &GpcField, q: u32) -> Result<f64> {
        self.check(f)?;
        let f = self.microscopic(f);
        let kk = f.n_modes();
        let h = self.h_values(&f);
        let coupling = &self.sg.coupling;
        let weights: Vec<f64> = (0..kk).map(|k| mode_weight(k, q)).collect();
        Ok(self.collision_sum(&h, kk, |c, i, l, delta| {
            let b0 = self.k0.get(c, i, l);
            let b1 = self.k1.get(c, i, l);
            let mut acc = 0.0;
            for k in 0..kk {
                let mut s = b0 * delta[k];
                if b1 != 0.0 {
                    for j in k.saturating_sub(1)..kk {
                        let cj = coupling[(k, j)];
                        if cj != 0.0 {
                            s += b1 * cj * delta[j];
                        }
                    }
                }
                acc += weights[k] * s * delta[k];
            }
            acc
        }))
    }

    /// `-¼ Σ_k k^{2q} ∫ Φ D M_i M*_l Δ[h_k]²` with the angular slack
    /// `D = b0 - (2^q + 2)|b1| sup|φ|`.
    pub fn d_route(&self, f: &GpcField, q: u32) -> Result<f64> {
        self.check(f)?;
        let f = self.microscopic(f);
        let kk = f.n_modes();
        let h = self.h_values(&f);
        let factor = (2f64.powi(q as i32) + 2.0) * self.model.angular.phi_sup(self.c_z);
        let weights: Vec<f64> = (0..kk).map(|k| mode_weight(k, q)).collect();
        let gamma = self.model.gamma();
        Ok(self.collision_sum(&h, kk, |c, i, l, delta| {
            let col = &self.ws.collisions()[c];
            let s = sin_cos(col.cos_theta);
            let d = self.model.c_phi(i, l)
                * col.weight
                * speed_factor(col.speed, gamma)
                * d_from(self.model.angular.b0(i, l), self.model.angular.b1(i, l), s, factor);
            let mut acc = 0.0;
            for k in 0..kk {
                acc += weights[k] * delta[k] * delta[k];
            }
            d * acc
        }))
    }
}

/// `k^{2q}` for the 0-based mode index (modes are numbered from 1).
fn mode_weight(k: usize, q: u32) -> f64 {
    ((k + 1) as f64).powi(2 * q as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// `(∫ ‖f^K(z) - ref(z)‖²_{L²_v} dπ)^{1/2}` by the supplied rule.
    pub l2_pi: f64,
    /// `max_s ‖f^K(z_s) - ref_s‖_{L²_v}`
    pub max_sample: f64,
    pub per_sample: Vec<f64>,
}

/// Reconstructs `f^K` at sample points and compares to reference fields.
pub fn reconstruct_and_error(basis: &GpcBasis, grid: &VelocityGrid, f: &GpcField, z: &[f64], w: &[f64], reference: &[SpeciesField]) -> Result<ErrorReport> {
    if z.len() != w.len() || z.len() != reference.len() || z.is_empty() {
        return Err(Error::Mismatch("sample points, weights and references differ in length".into()));
    }
    let mut per_sample = Vec::with_capacity(z.len());
    let mut acc = 0.0;
    for ((zs, ws), r) in z.iter().zip(w).zip(reference) {
        let fk = f.evaluate(basis, *zs);
        if !fk.same_shape(r) {
            return Err(Error::Mismatch("reference field shape differs".into()));
        }
        let d = fk.sub(r);
        let e2 = d.dot(&d, grid);
        acc += ws * e2;
        per_sample.push(e2.sqrt());
    }
    Ok(ErrorReport {
        l2_pi: acc.max(0.0).sqrt(),
        max_sample: per_sample.iter().cloned().fold(0.0, f64::max),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{AngularCoeffs, AngularKind, ZProfile};
    use crate::linop::assemble_l_sqrt_m;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_basis_values() {
        let b = build_basis(Measure::Uniform { c_z: 1.0 }, 2).unwrap();
        assert!((b.eval(0.5)[1] - 3f64.sqrt() * 0.5).abs() < 1e-15);
        assert!((b.jacobi()[(0, 1)] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(b.jacobi()[(0, 0)], 0.0);
        let c = b.project_function(&b.quadrature().nodes.clone()).unwrap();
        assert!((c[1] - 1.0 / 3f64.sqrt()).abs() < 1e-14);
        let ones = vec![1.0; b.quadrature().len()];
        let c1 = b.project_function(&ones).unwrap();
        assert!((c1[0] - 1.0).abs() < 1e-14 && c1[1].abs() < 1e-14);
    }

    #[test]
    fn bases_are_orthonormal_and_tridiagonal() {
        for m in [
            Measure::Uniform { c_z: 0.7 },
            Measure::Beta {
                alpha: 2.0,
                beta: 2.0,
                c_z: 1.0,
            },
            Measure::Beta {
                alpha: 0.5,
                beta: 3.0,
                c_z: 2.0,
            },
        ] {
            let b = build_basis(m, 6).unwrap();
            assert!(b.orthonormality_defect() < 1e-12, "{m:?}");
            let jq = b.triple_matrix(|z| z);
            assert!((&jq - b.jacobi()).abs().max() < 1e-12);
            for k in 0..6usize {
                for j in 0..6 {
                    if k.abs_diff(j) >= 2 {
                        assert_eq!(b.jacobi()[(k, j)], 0.0);
                    }
                }
                if m.is_symmetric() {
                    assert!(b.jacobi()[(k, k)].abs() < 1e-15);
                }
            }
            assert!(b.quadrature().nodes.iter().all(|z| z.abs() <= m.c_z()));
        }
        assert!(build_basis(Measure::Uniform { c_z: 0.0 }, 3).is_err());
        assert!(build_basis(Measure::Uniform { c_z: 1.0 }, 0).is_err());
    }

    #[test]
    fn polynomial_projection_roundtrip() {
        let b = build_basis(
            Measure::Beta {
                alpha: 1.0,
                beta: 0.0,
                c_z: 1.5,
            },
            4,
        )
        .unwrap();
        let g = |z: f64| 0.3 - z + 0.25 * z * z * z;
        let samples: Vec<f64> = b.quadrature().nodes.iter().map(|z| g(*z)).collect();
        let c = b.project_function(&samples).unwrap();
        for z in [-1.2, 0.0, 0.4, 1.5] {
            assert!((b.reconstruct(&c, z) - g(z)).abs() < 1e-12);
        }
        let psi3: Vec<f64> = b.quadrature().nodes.iter().map(|z| b.eval(*z)[2]).collect();
        let e = b.project_function(&psi3).unwrap();
        for (k, x) in e.iter().enumerate() {
            assert!((x - if k == 2 { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }

    fn small() -> (CollisionWorkspace, KernelModel, SpeciesSet) {
        let grid = VelocityGrid::new(2, 6, 3.5, 8).unwrap();
        let ws = CollisionWorkspace::new(&grid);
        let model = KernelModel::uniform(
            0.0,
            2,
            1.0,
            AngularKind::LinearInZ,
            AngularCoeffs { a: 0.1, c: 0.2 },
            AngularCoeffs { a: 0.02, c: 0.01 },
        )
        .unwrap();
        (ws, model, SpeciesSet::new(vec![1.0, 0.5]).unwrap())
    }

    fn random_gpc(n: usize, k: usize, np: usize, seed: u64) -> GpcField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GpcField::from_values(n, k, np, (0..n * k * np).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_mode_reduces_to_mean_kernel() {
        let (ws, model, species) = small();
        let basis = build_basis(
            Measure::Beta {
                alpha: 1.0,
                beta: 3.0,
                c_z: 1.0,
            },
            1,
        )
        .unwrap();
        let sg = assemble_sg_operator(&ws, &model, &basis, &species).unwrap();
        let l = assemble_l_sqrt_m(&ws, &model, &species, basis.mean()).unwrap();
        let d = (&sg.matrix - &l.matrix).norm() / l.matrix.norm();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn sg_blocks_are_tridiagonal_and_match_collocation() {
        let (ws, model, species) = small();
        let basis = build_basis(Measure::Uniform { c_z: 1.0 }, 4).unwrap();
        let sg = SgOperator::new(&ws, &model, &basis, &species).unwrap();
        for k in 0..4usize {
            for j in 0..4 {
                if k.abs_diff(j) >= 2 {
                    assert!(sg.block(k, j).iter().all(|x| *x == 0.0));
                }
            }
        }
        // ⟨L_z(f^K(z)), ψ_k⟩ by z-quadrature
        let f = random_gpc(2, 4, ws.grid().len(), 3);
        let direct = sg.apply(&f).unwrap();
        let quad = basis.quadrature();
        let mut modes = vec![SpeciesField::zeros(2, ws.grid().len()); 4];
        for (z, w) in quad.nodes.iter().zip(&quad.weights) {
            let lz = assemble_l_sqrt_m(&ws, &model, &species, *z).unwrap();
            let out = lz.apply_field(&f.evaluate(&basis, *z)).unwrap();
            for (m, pk) in modes.iter_mut().zip(basis.eval(*z)) {
                m.axpy(w * pk, &out);
            }
        }
        let colloc = GpcField::from_modes(&modes).unwrap();
        let mut d = direct.clone();
        d.axpy(-1.0, &colloc);
        assert!(d.max_abs() < 1e-12 * direct.max_abs());
    }

    #[test]
    fn smooth_kernel_coupling_matches_quadrature() {
        let grid = VelocityGrid::new(2, 4, 2.0, 4).unwrap();
        let _ = grid;
        let kind = AngularKind::GeneralSmooth {
            profile: ZProfile::Sin { freq: 1.0, phase: 0.3 },
            max_order: 3,
        };
        let model = KernelModel::uniform(0.0, 2, 1.0, kind, AngularCoeffs::constant(1.0), AngularCoeffs { a: 0.2, c: 0.1 }).unwrap();
        let basis = build_basis(Measure::Uniform { c_z: 1.0 }, 3).unwrap();
        let s = assemble_s_tensor(&basis, &model);
        let q = s_tensor_by_quadrature(&basis, &model, 0, 1, 0.4).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                assert!((s.entry(&model, 0, 1, k, j, 0.4) - q[(k, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn term_i_routes_agree() {
        let (ws, model, species) = small();
        let basis = build_basis(Measure::Uniform { c_z: 1.0 }, 3).unwrap();
        let ctx = TermIContext::new(&ws, &model, &basis, &species).unwrap();
        for seed in 0..3 {
            let f = random_gpc(2, 3, ws.grid().len(), seed);
            for q in 0..3 {
                let direct = ctx.term_i(&f, q).unwrap();
                let sym = ctx.symmetrized(&f, q).unwrap();
                let d = ctx.d_route(&f, q).unwrap();
                assert!((direct.value - sym).abs() < 1e-10 * sym.abs(), "{} {}", direct.value, sym);
                assert!(direct.value < 0.0);
                assert!(sym <= d, "{sym} {d}");
            }
        }
    }

    #[test]
    fn term_i_vanishes_on_invariants() {
        let (ws, model, species) = small();
        let basis = build_basis(Measure::Uniform { c_z: 1.0 }, 2).unwrap();
        let ctx = TermIContext::new(&ws, &model, &basis, &species).unwrap();
        let f = GpcField::zeros(2, 2, ws.grid().len());
        let rep = ctx.term_i(&f, 1).unwrap();
        assert_eq!(rep.value, 0.0);
        assert!(rep.ratio.is_none());
    }

    #[test]
    fn exact_representation_has_no_error() {
        let grid = VelocityGrid::new(2, 4, 2.0, 4).unwrap();
        let basis = build_basis(Measure::Uniform { c_z: 1.0 }, 3).unwrap();
        let shape = |z: f64| SpeciesField::from_fn(&grid, 2, |i, v| (1.0 + z - 0.5 * z * z) * (v[0] + i as f64));
        let nodes: Vec<SpeciesField> = basis.quadrature().nodes.iter().map(|z| shape(*z)).collect();
        let f = GpcField::project(&basis, &nodes).unwrap();
        let q = basis.quadrature();
        let rep = reconstruct_and_error(&basis, &grid, &f, &q.nodes, &q.weights, &nodes).unwrap();
        assert!(rep.max_sample < 1e-12);
    }
}
