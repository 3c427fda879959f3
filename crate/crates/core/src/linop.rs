//! Linearized collision operators, the Θ_δ splitting `L = A + B - ν`, the
//! projector onto the collision invariants, spectra, and the empirical
//! operator constants of the A/B parts.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::collision::{collision_frequency_with, CollisionWorkspace, KernelTable, NuConvention};
use crate::error::{Error, Result};
use crate::grid::{maxwellian, norm2, weighted_norm, InvariantProjector, NormKind, PerturbationForm, SpeciesField, SpeciesSet, VelocityGrid};
use crate::kernel::KernelModel;

/// Largest number of unknowns handled by dense eigensolves.
pub const DENSE_LIMIT: usize = 12_000;

/// Hilbert structure in which an operator is self-adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerProduct {
    /// Plain `L^2_v`.
    L2,
    /// `L^2_v(M^{-1/2})`: `<f, g> = Σ f g / M`.
    L2InvMaxwellian,
}

impl InnerProduct {
    pub fn of(form: PerturbationForm) -> Self {
        match form {
            PerturbationForm::Additive => InnerProduct::L2InvMaxwellian,
            PerturbationForm::SqrtWeighted => InnerProduct::L2,
        }
    }
}

/// Dense operator on (species × gPC mode × velocity) unknowns, ordered
/// species-major, then mode, then point.
#[derive(Debug, Clone)]
pub struct AssembledOperator {
    pub matrix: DMatrix<f64>,
    pub n_species: usize,
    pub n_modes: usize,
    pub n_points: usize,
    pub inner: InnerProduct,
    /// Maxwellian value attached to every unknown, needed for
    /// [`InnerProduct::L2InvMaxwellian`].
    pub maxwellian: Option<Vec<f64>>,
}

impl AssembledOperator {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(x);
        (&self.matrix * v).iter().cloned().collect()
    }

    /// Applies a single-mode operator to a field.
    pub fn apply_field(&self, f: &SpeciesField) -> Result<SpeciesField> {
        if f.as_slice().len() != self.size() {
            return Err(Error::Mismatch(format!(
                "operator of size {} applied to {} values",
                self.size(),
                f.as_slice().len()
            )));
        }
        SpeciesField::from_values(f.n_species(), f.n_points(), self.apply(f.as_slice()))
    }

    /// `M^{-1/2} A M^{1/2}` for the weighted inner product, `A` otherwise;
    /// self-adjointness of `A` is plain symmetry of this matrix.
    pub fn l2_form(&self) -> DMatrix<f64> {
        match (&self.inner, &self.maxwellian) {
            (InnerProduct::L2InvMaxwellian, Some(m)) => {
                let s: Vec<f64> = m.iter().map(|x| x.sqrt()).collect();
                DMatrix::from_fn(self.size(), self.size(), |r, c| self.matrix[(r, c)] * s[c] / s[r])
            }
            _ => self.matrix.clone(),
        }
    }

    /// `‖S - Sᵀ‖_F / ‖S‖_F` of [`Self::l2_form`].
    pub fn symmetry_defect(&self) -> f64 {
        let s = self.l2_form();
        let norm = s.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (&s - s.transpose()).norm() / norm
    }

    /// Inner product in the operator's Hilbert structure (without the
    /// quadrature weight).
    pub fn inner_product(&self, x: &[f64], y: &[f64]) -> f64 {
        match (&self.inner, &self.maxwellian) {
            (InnerProduct::L2InvMaxwellian, Some(m)) => x.iter().zip(y).zip(m).map(|((a, b), w)| a * b / w).sum(),
            _ => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        }
    }

    pub fn add(&self, other: &AssembledOperator) -> Result<AssembledOperator> {
        if self.size() != other.size() {
            return Err(Error::Mismatch("operator sizes differ".into()));
        }
        let mut out = self.clone();
        out.matrix += &other.matrix;
        Ok(out)
    }

    /// Subtracts the multiplication operator by `nu`.
    pub fn minus_diagonal(&self, nu: &[f64]) -> AssembledOperator {
        let mut out = self.clone();
        for (r, x) in nu.iter().enumerate() {
            out.matrix[(r, r)] -= x;
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.matrix.norm()
    }
}

/// Something that can apply a symmetric operator without storing it.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply_into(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let r = self * DVector::from_column_slice(x);
        y.copy_from_slice(r.as_slice());
    }
}

/// Smooth truncation parameters of the A/B splitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationParams {
    delta: f64,
}

impl TruncationParams {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta", "must lie in (0, 1)"));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Quintic smoothstep: 0 for `t ≤ 0`, 1 for `t ≥ 1`, `C^2` in between.
fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (t * (6.0 * t - 15.0) + 10.0)
    }
}

/// `Θ_δ` from `|v|`, `|v - v*|` and `cos θ`.
pub fn theta_scalar(params: &TruncationParams, speed: f64, relative_speed: f64, cos_theta: f64) -> f64 {
    let d = params.delta;
    let inv = 1.0 / d;
    // 1 on |v| ≤ 1/δ, 0 beyond 2/δ
    let w_v = smoothstep((2.0 * inv - speed) / inv);
    // rises on [δ, 2δ], falls on [1/δ, 2/δ]
    let w_u = smoothstep((relative_speed - d) / d) * smoothstep((2.0 * inv - relative_speed) / inv);
    // 1 on |cos| ≤ 1 - 2δ, 0 on |cos| ≥ 1 - δ
    let w_c = smoothstep((1.0 - d - cos_theta.abs()) / d);
    w_v * w_u * w_c
}

/// `Θ_δ(v, v*, σ)` with the deviation angle given through `cos θ`.
pub fn theta_delta(params: &TruncationParams, v: &[f64; 3], v_star: &[f64; 3], cos_theta: f64) -> f64 {
    let d = [v[0] - v_star[0], v[1] - v_star[1], v[2] - v_star[2]];
    theta_scalar(params, norm2(v).sqrt(), norm2(&d).sqrt(), cos_theta)
}

/// Per-collision values of `Θ_δ` for a workspace.
pub fn theta_table(ws: &CollisionWorkspace, params: &TruncationParams) -> Vec<f64> {
    let grid = ws.grid();
    let mut out = vec![0.0; ws.len()];
    for p in 0..grid.len() {
        let speed = norm2(grid.point(p)).sqrt();
        for c in ws.range(p) {
            let col = &ws.collisions()[c];
            out[c] = theta_scalar(params, speed, col.speed, col.cos_theta);
        }
    }
    out
}

fn row_major_assembly(n_dof: usize, fill: impl Fn(usize, &mut [f64]) + Sync) -> DMatrix<f64> {
    let mut rows = vec![0.0; n_dof * n_dof];
    rows.par_chunks_mut(n_dof).enumerate().for_each(|(r, row)| fill(r, row));
    DMatrix::from_row_slice(n_dof, n_dof, &rows)
}

/// Which collision terms are kept by [`assemble_plain_terms`].
#[derive(Clone, Copy)]
enum PlainTerms<'a> {
    /// `L = Σ_j Q_ij(M_i, f_j) + Q_ij(f_i, M_j)`
    Full,
    /// The three non-multiplicative terms of `L` weighted by `w[c]`.
    Weighted(&'a [f64]),
    /// The same three terms weighted by `1 - w[c]`.
    Complement(&'a [f64]),
}

fn assemble_plain_terms(ws: &CollisionWorkspace, table: &KernelTable, m: &SpeciesField, terms: PlainTerms<'_>) -> DMatrix<f64> {
    let n = table.n_species();
    let np = ws.grid().len();
    row_major_assembly(n * np, |r, row| {
        let (i, p) = (r / np, r % np);
        for c in ws.range(p) {
            let col = &ws.collisions()[c];
            let (q, pp, qq) = (col.q as usize, col.pp as usize, col.qq as usize);
            let t = match terms {
                PlainTerms::Full => 1.0,
                PlainTerms::Weighted(w) => w[c],
                PlainTerms::Complement(w) => 1.0 - w[c],
            };
            for l in 0..n {
                let k = table.get(c, i, l);
                if k == 0.0 {
                    continue;
                }
                let kt = k * t;
                row[i * np + pp] += kt * m.get(l, qq);
                row[l * np + qq] += kt * m.get(i, pp);
                row[l * np + q] -= kt * m.get(i, p);
                if let PlainTerms::Full = terms {
                    row[i * np + p] -= k * m.get(l, q);
                }
            }
        }
    })
}

fn sqrt_assembly(ws: &CollisionWorkspace, table: &KernelTable, m: &SpeciesField) -> DMatrix<f64> {
    let n = table.n_species();
    let np = ws.grid().len();
    let s: Vec<f64> = m.as_slice().iter().map(|x| x.sqrt()).collect();
    row_major_assembly(n * np, |r, row| {
        let (i, p) = (r / np, r % np);
        for c in ws.range(p) {
            let col = &ws.collisions()[c];
            let (q, pp, qq) = (col.q as usize, col.pp as usize, col.qq as usize);
            for l in 0..n {
                let k = table.get(c, i, l);
                if k == 0.0 {
                    continue;
                }
                let a = k * s[i * np + p] * m.get(l, q);
                row[i * np + pp] += a / s[i * np + pp];
                row[l * np + qq] += a / s[l * np + qq];
                row[i * np + p] -= a / s[i * np + p];
                row[l * np + q] -= a / s[l * np + q];
            }
        }
    })
}

fn operator(matrix: DMatrix<f64>, m: &SpeciesField, form: PerturbationForm) -> AssembledOperator {
    AssembledOperator {
        matrix,
        n_species: m.n_species(),
        n_modes: 1,
        n_points: m.n_points(),
        inner: InnerProduct::of(form),
        maxwellian: match form {
            PerturbationForm::Additive => Some(m.as_slice().to_vec()),
            PerturbationForm::SqrtWeighted => None,
        },
    }
}

/// Linearized operator of a prepared kernel table in either perturbation form.
pub fn assemble_linearized(ws: &CollisionWorkspace, table: &KernelTable, species: &SpeciesSet, form: PerturbationForm) -> Result<AssembledOperator> {
    if table.n_species() != species.len() {
        return Err(Error::Mismatch("kernel and species set disagree on N".into()));
    }
    let m = maxwellian(ws.grid(), species);
    let matrix = match form {
        PerturbationForm::Additive => assemble_plain_terms(ws, table, &m, PlainTerms::Full),
        PerturbationForm::SqrtWeighted => sqrt_assembly(ws, table, &m),
    };
    Ok(operator(matrix, &m, form))
}

/// `L̃ = M^{-1/2} L M^{1/2}`, self-adjoint in `L^2_v`.
pub fn assemble_l_sqrt_m(ws: &CollisionWorkspace, model: &KernelModel, species: &SpeciesSet, z: f64) -> Result<AssembledOperator> {
    model.check_species(species)?;
    let table = KernelTable::at(ws, model, z, 0)?;
    assemble_linearized(ws, &table, species, PerturbationForm::SqrtWeighted)
}

/// `L_i(f) = Σ_j Q_ij(M_i, f_j) + Q_ij(f_i, M_j)`, self-adjoint in `L^2_v(M^{-1/2})`.
pub fn assemble_l_plain(ws: &CollisionWorkspace, model: &KernelModel, species: &SpeciesSet, z: f64) -> Result<AssembledOperator> {
    model.check_species(species)?;
    let table = KernelTable::at(ws, model, z, 0)?;
    assemble_linearized(ws, &table, species, PerturbationForm::Additive)
}

/// Matrix-free `L̃ h` by gathering over collisions.
pub fn apply_l_sqrt_m(ws: &CollisionWorkspace, table: &KernelTable, m: &SpeciesField, g: &SpeciesField) -> Result<SpeciesField> {
    let n = table.n_species();
    let np = ws.grid().len();
    if g.n_species() != n || g.n_points() != np || !m.same_shape(g) {
        return Err(Error::Mismatch("field shape differs from the workspace".into()));
    }
    let s: Vec<f64> = m.as_slice().iter().map(|x| x.sqrt()).collect();
    let h: Vec<f64> = g.as_slice().iter().zip(&s).map(|(a, b)| a / b).collect();
    let out: Vec<f64> = (0..n * np)
        .into_par_iter()
        .map(|r| {
            let (i, p) = (r / np, r % np);
            let mut acc = 0.0;
            for c in ws.range(p) {
                let col = &ws.collisions()[c];
                let (q, pp, qq) = (col.q as usize, col.pp as usize, col.qq as usize);
                for l in 0..n {
                    let k = table.get(c, i, l);
                    acc += k * m.get(l, q) * (h[i * np + pp] + h[l * np + qq] - h[i * np + p] - h[l * np + q]);
                }
            }
            acc * s[r]
        })
        .collect();
    SpeciesField::from_values(n, np, out)
}

/// The two parts of the splitting at one derivative order, with the matching
/// collision frequency, all in the additive form.
#[derive(Debug, Clone)]
pub struct SplitOperators {
    pub a: AssembledOperator,
    pub b: AssembledOperator,
    /// `∂^k ν`, flattened species-major.
    pub nu: Vec<f64>,
}

impl SplitOperators {
    /// `A + B - ν`
    pub fn recombine(&self) -> AssembledOperator {
        self.a.add(&self.b).expect("same size").minus_diagonal(&self.nu)
    }
}

/// `A^{(δ)}` and `B^{(δ)}` of a prepared kernel table (derivative kernels
/// included) together with the collision frequency of the same table.
pub fn split_ab_table(ws: &CollisionWorkspace, table: &KernelTable, species: &SpeciesSet, params: &TruncationParams) -> Result<SplitOperators> {
    if table.n_species() != species.len() {
        return Err(Error::Mismatch("kernel and species set disagree on N".into()));
    }
    let m = maxwellian(ws.grid(), species);
    let theta = theta_table(ws, params);
    let a = assemble_plain_terms(ws, table, &m, PlainTerms::Weighted(&theta));
    let b = assemble_plain_terms(ws, table, &m, PlainTerms::Complement(&theta));
    let nu = collision_frequency_with(ws, table, &m, NuConvention::Standard)?;
    Ok(SplitOperators {
        a: operator(a, &m, PerturbationForm::Additive),
        b: operator(b, &m, PerturbationForm::Additive),
        nu: nu.into_values(),
    })
}

/// Splitting of the kernel differentiated `order` times at `z`.
pub fn split_ab(ws: &CollisionWorkspace, model: &KernelModel, species: &SpeciesSet, params: &TruncationParams, z: f64, order: usize) -> Result<SplitOperators> {
    model.check_species(species)?;
    let table = KernelTable::at(ws, model, z, order)?;
    split_ab_table(ws, &table, species, params)
}

/// Kernel of the generator, with or without (x-constant) transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorMode {
    Homogeneous,
    /// Periodic 1-D transport on `nx` cells: the kernel is the x-constant
    /// invariants.
    WithTransport {
        nx: usize,
    },
}

/// Dense orthogonal projector onto the kernel of the generator.
pub fn projector_pi_g(grid: &VelocityGrid, species: &SpeciesSet, form: PerturbationForm, mode: ProjectorMode) -> Result<AssembledOperator> {
    let pi = InvariantProjector::new(grid, species, form)?;
    let n = species.len();
    let np = grid.len();
    let size = n * np;
    let mut base = DMatrix::<f64>::zeros(size, size);
    let mut e = SpeciesField::zeros(n, np);
    for col in 0..size {
        e.as_mut_slice()[col] = 1.0;
        let out = pi.project(&e);
        base.set_column(col, &DVector::from_column_slice(out.as_slice()));
        e.as_mut_slice()[col] = 0.0;
    }
    let m = maxwellian(grid, species);
    let (matrix, maxw) = match mode {
        ProjectorMode::Homogeneous => (base, m.as_slice().to_vec()),
        ProjectorMode::WithTransport { nx } => {
            if nx == 0 {
                return Err(Error::invalid("nx", "must be positive"));
            }
            let big = size * nx;
            if big > DENSE_LIMIT {
                return Err(Error::TooLarge { size: big, limit: DENSE_LIMIT });
            }
            // unknowns ordered cell-major; Π_G = (x-average) ⊗ Π
            let mut mat = DMatrix::<f64>::zeros(big, big);
            let inv = 1.0 / nx as f64;
            for a in 0..nx {
                for b in 0..nx {
                    mat.view_mut((a * size, b * size), (size, size)).copy_from(&(&base * inv));
                }
            }
            let maxw = (0..nx).flat_map(|_| m.as_slice().iter().cloned()).collect();
            (mat, maxw)
        }
    };
    Ok(AssembledOperator {
        matrix,
        n_species: n,
        n_modes: 1,
        n_points: np,
        inner: InnerProduct::of(form),
        maxwellian: match form {
            PerturbationForm::Additive => Some(maxw),
            PerturbationForm::SqrtWeighted => None,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Sorted descending. Only extreme Ritz values in matrix-free mode.
    pub eigenvalues: Vec<f64>,
    pub zero_multiplicity: usize,
    /// `-λ` for the largest eigenvalue below `-tol_zero`.
    pub gap: f64,
    pub tol_zero: f64,
    pub symmetry_defect: f64,
    pub matrix_free: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralOptions {
    /// Relative kernel tolerance: `tol_zero = rel_zero · max|λ|`.
    pub rel_zero: f64,
    pub max_symmetry_defect: f64,
    /// Ritz values kept in matrix-free mode.
    pub lanczos_steps: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            rel_zero: 1e-8,
            max_symmetry_defect: 1e-8,
            lanczos_steps: 200,
        }
    }
}

/// Eigen-decomposition of a self-adjoint operator, symmetrized defensively.
pub fn spectral_analysis(op: &AssembledOperator) -> Result<SpectrumReport> {
    spectral_analysis_with(op, &SpectralOptions::default())
}

pub fn spectral_analysis_with(op: &AssembledOperator, opts: &SpectralOptions) -> Result<SpectrumReport> {
    let s = op.l2_form();
    let norm = s.norm();
    let defect = if norm == 0.0 { 0.0 } else { (&s - s.transpose()).norm() / norm };
    if defect > opts.max_symmetry_defect {
        return Err(Error::SymmetryDefect {
            defect,
            threshold: opts.max_symmetry_defect,
        });
    }
    let sym = (&s + s.transpose()) * 0.5;
    if sym.nrows() > DENSE_LIMIT {
        let mut ritz = lanczos_extremes(&sym, opts.lanczos_steps, 7)?;
        ritz.sort_by(|a, b| b.total_cmp(a));
        let scale = ritz.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        return Ok(summarize(ritz, opts.rel_zero * scale, defect, true));
    }
    let eig = SymmetricEigen::try_new(sym, 1e-15, 100_000).ok_or_else(|| Error::Eigensolver("dense symmetric eigensolver did not converge".into()))?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let scale = ev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(summarize(ev, opts.rel_zero * scale, defect, false))
}

fn summarize(ev: Vec<f64>, tol: f64, defect: f64, matrix_free: bool) -> SpectrumReport {
    let zero = ev.iter().filter(|x| x.abs() <= tol).count();
    let gap = ev.iter().find(|x| **x < -tol).map_or(0.0, |x| -x);
    SpectrumReport {
        eigenvalues: ev,
        zero_multiplicity: zero,
        gap,
        tol_zero: tol,
        symmetry_defect: defect,
        matrix_free,
    }
}

/// Ritz values of a symmetric operator after `steps` Lanczos iterations with
/// full reorthogonalization, from a seeded random start.
pub fn lanczos_extremes(op: &dyn LinearOperator, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let n = op.dim();
    let steps = steps.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.iter_mut().for_each(|x| *x /= nq);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    let mut w = vec![0.0; n];
    for k in 0..steps {
        op.apply_into(&basis[k], &mut w);
        let a: f64 = w.iter().zip(&basis[k]).map(|(x, y)| x * y).sum();
        alpha.push(a);
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nb = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if k + 1 == steps || nb < 1e-13 * a.abs().max(1.0) {
            break;
        }
        beta.push(nb);
        basis.push(w.iter().map(|x| x / nb).collect());
    }
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |r, c| {
        if r == c {
            alpha[r]
        } else if r + 1 == c {
            beta[r]
        } else if c + 1 == r {
            beta[c]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::try_new(t, 1e-15, 10_000).ok_or_else(|| Error::Eigensolver("Lanczos tridiagonal solve failed".into()))?;
    Ok(eig.eigenvalues.iter().cloned().collect())
}

/// One row of the k-sweep of [`estimate_operator_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsRow {
    pub k: f64,
    pub c_a_hat: f64,
    pub c_b_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsReport {
    pub rows: Vec<ConstantsRow>,
    /// Smallest swept `k` from which `Ĉ_B < 1` for the rest of the sweep.
    pub k0_hat: Option<f64>,
}

impl ConstantsReport {
    pub fn b_nonincreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].c_b_hat <= w[0].c_b_hat)
    }
}

/// Empirical constants of the A/B parts: for every `k`,
/// `Ĉ_A = max ‖A f‖_{L∞(⟨v⟩^β M^{-1/2})} / ‖f‖_{L1(⟨v⟩^k)}` and
/// `Ĉ_B = max ‖B f‖_{L1(⟨v⟩^k)} / ‖f‖_{L1(⟨v⟩^k ν)}` over seeded random probes.
#[allow(clippy::too_many_arguments)]
pub fn estimate_operator_constants(
    grid: &VelocityGrid,
    species: &SpeciesSet,
    split: &SplitOperators,
    ks: &[f64],
    beta: f64,
    probes: usize,
    seed: u64,
) -> Result<ConstantsReport> {
    if probes < 100 {
        return Err(Error::invalid("probes", "at least 100 probes are required"));
    }
    let n = species.len();
    let np = grid.len();
    if split.a.size() != n * np {
        return Err(Error::Mismatch("operators do not match the grid".into()));
    }
    let m = maxwellian(grid, species);
    let nu = SpeciesField::from_values(n, np, split.nu.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields: Vec<SpeciesField> = (0..probes).map(|_| probe_field(grid, n, &mut rng)).collect();
    let images: Vec<(SpeciesField, SpeciesField)> = fields
        .par_iter()
        .map(|f| (split.a.apply_field(f).expect("sized"), split.b.apply_field(f).expect("sized")))
        .collect();
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c_a: f64 = 0.0;
        let mut c_b: f64 = 0.0;
        for (f, (af, bf)) in fields.iter().zip(&images) {
            let in_a = weighted_norm(grid, f, k, NormKind::L1Poly)?;
            let in_b = weighted_norm(grid, f, k, NormKind::L1PolyNu { nu: Some(&nu) })?;
            let out_a = weighted_norm(grid, af, beta, NormKind::LinfPolyInvSqrtM { maxwellian: &m })?;
            let out_b = weighted_norm(grid, bf, k, NormKind::L1Poly)?;
            if in_a > 0.0 {
                c_a = c_a.max(out_a / in_a);
            }
            if in_b > 0.0 {
                c_b = c_b.max(out_b / in_b);
            }
        }
        rows.push(ConstantsRow { k, c_a_hat: c_a, c_b_hat: c_b });
    }
    let k0_hat = (0..rows.len()).find(|&s| rows[s..].iter().all(|r| r.c_b_hat < 1.0)).map(|s| rows[s].k);
    Ok(ConstantsReport { rows, k0_hat })
}

/// Random signed field with independent uniform(-1, 1) values.
fn probe_field(grid: &VelocityGrid, n: usize, rng: &mut ChaCha8Rng) -> SpeciesField {
    let np = grid.len();
    let mut f = SpeciesField::zeros(n, np);
    for x in f.as_mut_slice() {
        *x = rng.gen_range(-1.0..1.0);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::collision_invariants;
    use crate::kernel::{AngularCoeffs, AngularKind};

    fn setup() -> (CollisionWorkspace, KernelModel, SpeciesSet) {
        let grid = VelocityGrid::new(2, 8, 4.0, 8).unwrap();
        let ws = CollisionWorkspace::new(&grid);
        let model = KernelModel::uniform(
            0.5,
            2,
            1.0,
            AngularKind::LinearInZ,
            AngularCoeffs { a: 0.2, c: 0.3 },
            AngularCoeffs { a: 0.0, c: 0.02 },
        )
        .unwrap();
        (ws, model, SpeciesSet::new(vec![1.0, 0.6]).unwrap())
    }

    #[test]
    fn theta_examples() {
        let p = TruncationParams::new(0.1).unwrap();
        assert_eq!(theta_scalar(&p, 1.0, 1.0, 0.0), 1.0);
        assert_eq!(theta_scalar(&p, 1.0, 0.05, 0.0), 0.0);
        let mid = theta_scalar(&p, 1.0, 0.15, 0.0);
        assert!(mid > 0.0 && mid < 1.0);
        assert_eq!(theta_scalar(&p, 25.0, 1.0, 0.0), 0.0);
        assert_eq!(theta_scalar(&p, 1.0, 1.0, 0.95), 0.0);
        assert!(TruncationParams::new(1.0).is_err());
    }

    #[test]
    fn sqrt_form_is_symmetric_and_kills_invariants() {
        let (ws, model, species) = setup();
        let op = assemble_l_sqrt_m(&ws, &model, &species, 0.2).unwrap();
        assert!(op.symmetry_defect() < 1e-13);
        let m = maxwellian(ws.grid(), &species);
        let s = SpeciesField::from_values(2, m.n_points(), m.as_slice().iter().map(|x| x.sqrt()).collect()).unwrap();
        for phi in collision_invariants(ws.grid(), 2) {
            let out = op.apply_field(&phi.mul(&s)).unwrap();
            assert!(out.max_abs() < 1e-13 * op.frobenius(), "{}", out.max_abs());
        }
    }

    #[test]
    fn plain_and_sqrt_forms_are_similar() {
        let (ws, model, species) = setup();
        let a = assemble_l_sqrt_m(&ws, &model, &species, -0.3).unwrap();
        let b = assemble_l_plain(&ws, &model, &species, -0.3).unwrap();
        let diff = (&a.matrix - b.l2_form()).norm() / a.matrix.norm();
        assert!(diff < 1e-12, "{diff}");
        assert!(b.symmetry_defect() < 1e-12);
    }

    #[test]
    fn matrix_free_matches_dense() {
        let (ws, model, species) = setup();
        let table = KernelTable::at(&ws, &model, 0.1, 0).unwrap();
        let op = assemble_linearized(&ws, &table, &species, PerturbationForm::SqrtWeighted).unwrap();
        let m = maxwellian(ws.grid(), &species);
        let g = SpeciesField::from_fn(ws.grid(), 2, |i, v| (v[0] + 0.5 * i as f64).sin() * (-0.1 * v[1] * v[1]).exp());
        let a = op.apply_field(&g).unwrap();
        let b = apply_l_sqrt_m(&ws, &table, &m, &g).unwrap();
        assert!(a.sub(&b).max_abs() < 1e-13 * a.max_abs());
    }

    #[test]
    fn splitting_recombines() {
        let (ws, model, species) = setup();
        let params = TruncationParams::new(0.3).unwrap();
        let split = split_ab(&ws, &model, &species, &params, 0.4, 0).unwrap();
        let l = assemble_l_plain(&ws, &model, &species, 0.4).unwrap();
        let diff = (&split.recombine().matrix - &l.matrix).norm() / l.matrix.norm();
        assert!(diff < 1e-14, "{diff}");
        let d2 = split_ab(&ws, &model, &species, &params, 0.4, 2).unwrap();
        assert!(d2.a.matrix.iter().all(|x| *x == 0.0));
        assert!(d2.b.matrix.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn a_rows_vanish_outside_truncation() {
        let (ws, model, species) = setup();
        let params = TruncationParams::new(0.7).unwrap();
        let split = split_ab(&ws, &model, &species, &params, 0.0, 0).unwrap();
        let np = ws.grid().len();
        let mut checked = 0;
        for p in 0..np {
            if norm2(ws.grid().point(p)).sqrt() > 2.0 / 0.7 {
                for i in 0..2 {
                    assert!(split.a.matrix.row(i * np + p).iter().all(|x| *x == 0.0));
                }
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn projector_properties() {
        let grid = VelocityGrid::new(2, 6, 3.0, 4).unwrap();
        let species = SpeciesSet::new(vec![1.0, 2.0]).unwrap();
        let pi = projector_pi_g(&grid, &species, PerturbationForm::Additive, ProjectorMode::Homogeneous).unwrap();
        let sq = &pi.matrix * &pi.matrix;
        assert!((&sq - &pi.matrix).abs().max() < 1e-12);
        assert!(pi.symmetry_defect() < 1e-12);
        let rank = spectral_analysis(&pi).unwrap().eigenvalues.iter().filter(|x| (*x - 1.0).abs() < 1e-8).count();
        assert_eq!(rank, 5);
        let pt = projector_pi_g(&grid, &species, PerturbationForm::SqrtWeighted, ProjectorMode::WithTransport { nx: 3 }).unwrap();
        let sq = &pt.matrix * &pt.matrix;
        assert!((&sq - &pt.matrix).abs().max() < 1e-12);
        let rank = spectral_analysis(&pt).unwrap().eigenvalues.iter().filter(|x| (*x - 1.0).abs() < 1e-8).count();
        assert_eq!(rank, 5);
    }

    #[test]
    fn spectrum_has_invariant_kernel() {
        let (ws, model, species) = setup();
        let op = assemble_l_sqrt_m(&ws, &model, &species, 0.0).unwrap();
        let rep = spectral_analysis(&op).unwrap();
        assert_eq!(rep.zero_multiplicity, 5);
        assert!(rep.gap > 0.0);
        assert!(rep.eigenvalues[0] <= rep.tol_zero);
    }

    #[test]
    fn lanczos_finds_extremes() {
        let (ws, model, species) = setup();
        let op = assemble_l_sqrt_m(&ws, &model, &species, 0.0).unwrap();
        let dense = spectral_analysis(&op).unwrap();
        let ritz = lanczos_extremes(&op.matrix, 60, 3).unwrap();
        let lo = ritz.iter().cloned().fold(f64::INFINITY, f64::min);
        let lo_dense = *dense.eigenvalues.last().unwrap();
        assert!((lo - lo_dense).abs() < 1e-8 * lo_dense.abs());
    }

    #[test]
    fn zero_operator_has_zero_constants() {
        let (ws, model, species) = setup();
        let params = TruncationParams::new(0.3).unwrap();
        let split = split_ab(&ws, &model, &species, &params, 0.0, 3).unwrap();
        let rep = estimate_operator_constants(ws.grid(), &species, &split, &[0.0, 2.0], 0.0, 100, 1);
        // ν of a vanishing kernel is zero, so the B ratio has no denominator
        let rep = rep.unwrap();
        assert!(rep.rows.iter().all(|r| r.c_a_hat == 0.0 && r.c_b_hat == 0.0));
    }
}
