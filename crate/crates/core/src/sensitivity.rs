//! The z-derivative hierarchy: Leibniz expansions of the collision operator
//! and of the split linear generator, the binomial pairing identity of the
//! quadratic cross terms, joint evolution of `∂_z^n f`, the two-part
//! decomposition of `∂_z^n f`, and its Duhamel/Picard construction.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collision::{q_bilinear, q_tilde, CollisionWorkspace, KernelTable};
use crate::error::{Error, Result};
use crate::grid::{weighted_norm, InvariantProjector, NormKind, PerturbationForm, SpeciesField, SpeciesSet, VelocityGrid};
use crate::kernel::KernelModel;
use crate::linop::{estimate_operator_constants, split_ab_table, SplitOperators, TruncationParams};
use crate::quadrature::gauss_legendre_on;
use crate::solver::{advance, BlockRhs, Hierarchy, PerturbationSpec, Problem, TimeScheme};

/// Highest supported derivative order.
pub const MAX_ORDER: usize = 6;

/// `C(n, k)` as a float.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// `∂_z^n f` for `n = 0..=order` at one `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    pub order: usize,
    pub derivs: Vec<SpeciesField>,
    pub z: f64,
    pub t: f64,
}

impl SensitivityState {
    pub fn new(derivs: Vec<SpeciesField>, z: f64) -> Result<Self> {
        let first = derivs.first().ok_or_else(|| Error::invalid("derivs", "need at least the zeroth order"))?;
        if derivs.iter().any(|d| !d.same_shape(first)) {
            return Err(Error::Mismatch("derivative fields differ in shape".into()));
        }
        if derivs.len() - 1 > MAX_ORDER {
            return Err(Error::invalid("r", format!("derivative order is limited to {MAX_ORDER}")));
        }
        Ok(Self {
            order: derivs.len() - 1,
            derivs,
            z,
            t: 0.0,
        })
    }

    /// `∂^n f_0` from a perturbation spec, each order projected onto the
    /// microscopic subspace. Returns the state and the `L¹` norm removed from
    /// each order by the projection.
    pub fn initial(problem: &Problem, spec: &PerturbationSpec, z: f64, order: usize, form: PerturbationForm) -> Result<(Self, Vec<f64>)> {
        let grid = problem.grid();
        let proj = InvariantProjector::new(grid, &problem.species, form)?;
        let mut derivs = Vec::with_capacity(order + 1);
        let mut removed = Vec::with_capacity(order + 1);
        for n in 0..=order {
            let raw = spec.velocity_profile(grid, problem.species.len(), z, n);
            let hydro = proj.project(&raw);
            let lost = weighted_norm(grid, &hydro, 0.0, NormKind::L1Poly)?;
            if lost > 0.0 {
                log::info!("order {n}: projection removed L1 mass {lost:.3e}");
            }
            removed.push(lost);
            derivs.push(raw.sub(&hydro));
        }
        Ok((Self::new(derivs, z)?, removed))
    }
}

fn check_tables(tables: &[Option<KernelTable>], derivs: &[SpeciesField], n: usize) -> Result<()> {
    if n >= tables.len() || n >= derivs.len() {
        return Err(Error::DerivativeOrder {
            requested: n,
            max: tables.len().min(derivs.len()).saturating_sub(1),
        });
    }
    Ok(())
}

/// `∂^n Q(f) = Σ_l C(n,l) Σ_m C(l,m) Q^{b^{n-l}}(∂^m f, ∂^{l-m} f)` from
/// kernel-derivative tables (`None` for vanishing derivatives).
pub fn leibniz_q_with(ws: &CollisionWorkspace, tables: &[Option<KernelTable>], derivs: &[SpeciesField], n: usize) -> Result<SpeciesField> {
    check_tables(tables, derivs, n)?;
    let mut out = SpeciesField::zeros(derivs[0].n_species(), derivs[0].n_points());
    for l in 0..=n {
        let Some(table) = &tables[n - l] else { continue };
        for m in 0..=l {
            let c = binomial(n, l) * binomial(l, m);
            out.axpy(c, &q_bilinear(ws, table, &derivs[m], &derivs[l - m])?);
        }
    }
    Ok(out)
}

/// `∂_z^n` of the nonlinear collision operator at `state.z`.
pub fn leibniz_q(ws: &CollisionWorkspace, model: &KernelModel, state: &SensitivityState, n: usize) -> Result<SpeciesField> {
    if n > state.order {
        return Err(Error::DerivativeOrder {
            requested: n,
            max: state.order,
        });
    }
    let tables = kernel_tables(ws, model, state.z, n)?;
    leibniz_q_with(ws, &tables, &state.derivs, n)
}

fn kernel_tables(ws: &CollisionWorkspace, model: &KernelModel, z: f64, n: usize) -> Result<Vec<Option<KernelTable>>> {
    (0..=n)
        .map(|k| {
            let t = KernelTable::at(ws, model, z, k)?;
            Ok(if t.is_zero() { None } else { Some(t) })
        })
        .collect()
}

/// `∂^n Q(f) - 2 Q̃(∂^n f, f)`: every term with a differentiated kernel or
/// with both arguments of order below `n`. Zero for `n = 0`.
pub fn term_star_with(ws: &CollisionWorkspace, tables: &[Option<KernelTable>], derivs: &[SpeciesField], n: usize) -> Result<SpeciesField> {
    check_tables(tables, derivs, n)?;
    let mut out = SpeciesField::zeros(derivs[0].n_species(), derivs[0].n_points());
    if n == 0 {
        return Ok(out);
    }
    for l in 0..=n {
        let Some(table) = &tables[n - l] else { continue };
        for m in 0..=l {
            if l == n && (m == 0 || m == n) {
                continue;
            }
            let c = binomial(n, l) * binomial(l, m);
            out.axpy(c, &q_bilinear(ws, table, &derivs[m], &derivs[l - m])?);
        }
    }
    Ok(out)
}

/// Both sides of the pairing identity for the cross terms of order `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingCheck {
    pub lhs: SpeciesField,
    pub rhs: SpeciesField,
    /// `‖lhs - rhs‖_{L¹_v}`
    pub residual: f64,
    pub lhs_norm: f64,
}

impl PairingCheck {
    pub fn relative(&self) -> f64 {
        if self.lhs_norm > 0.0 {
            self.residual / self.lhs_norm
        } else {
            self.residual
        }
    }
}

/// `Σ_j Σ_{k=1}^{n-1} C(n,k) Q_ij(∂^k f_i, ∂^{n-k} f_j)` against
/// `2 Σ_{k < n/2} C(n,k) Q̃_i(∂^k f, ∂^{n-k} f) + χ_n C(n, n/2) Q̃_i(∂^{n/2} f, ∂^{n/2} f)`,
/// `χ_n = 1` for even `n`.
pub fn check_q_eqn_identity(ws: &CollisionWorkspace, model: &KernelModel, state: &SensitivityState, n: usize) -> Result<PairingCheck> {
    if n < 2 {
        return Err(Error::invalid("n", "the pairing identity needs n >= 2"));
    }
    if n > state.order {
        return Err(Error::DerivativeOrder {
            requested: n,
            max: state.order,
        });
    }
    let table = KernelTable::at(ws, model, state.z, 0)?;
    let d = &state.derivs;
    let mut lhs = SpeciesField::zeros(d[0].n_species(), d[0].n_points());
    for k in 1..n {
        lhs.axpy(binomial(n, k), &q_bilinear(ws, &table, &d[k], &d[n - k])?);
    }
    let mut rhs = SpeciesField::zeros(d[0].n_species(), d[0].n_points());
    for k in 1..n.div_ceil(2) {
        rhs.axpy(2.0 * binomial(n, k), &q_tilde(ws, &table, &d[k], &d[n - k])?);
    }
    if n.is_multiple_of(2) {
        rhs.axpy(binomial(n, n / 2), &q_tilde(ws, &table, &d[n / 2], &d[n / 2])?);
    }
    let grid = ws.grid();
    Ok(PairingCheck {
        residual: weighted_norm(grid, &lhs.sub(&rhs), 0.0, NormKind::L1Poly)?,
        lhs_norm: weighted_norm(grid, &lhs, 0.0, NormKind::L1Poly)?,
        lhs,
        rhs,
    })
}

/// `A/B` splittings of every kernel derivative up to some order.
#[derive(Debug, Clone)]
pub struct SplitSet {
    splits: Vec<Option<SplitOperators>>,
}

impl SplitSet {
    pub fn new(ws: &CollisionWorkspace, model: &KernelModel, species: &SpeciesSet, params: &TruncationParams, z: f64, order: usize) -> Result<Self> {
        model.check_species(species)?;
        let splits = (0..=order)
            .map(|k| {
                let t = KernelTable::at(ws, model, z, k)?;
                if t.is_zero() {
                    Ok(None)
                } else {
                    split_ab_table(ws, &t, species, params).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { splits })
    }

    pub fn order(&self) -> usize {
        self.splits.len() - 1
    }

    pub fn get(&self, k: usize) -> Option<&SplitOperators> {
        self.splits.get(k).and_then(|s| s.as_ref())
    }

    /// `A_{b^k} f`
    pub fn a(&self, k: usize, f: &SpeciesField) -> Result<SpeciesField> {
        match self.get(k) {
            Some(s) => s.a.apply_field(f),
            None => Ok(SpeciesField::zeros(f.n_species(), f.n_points())),
        }
    }

    /// `B_{b^k} f - ∂^k ν f`
    pub fn b_minus_nu(&self, k: usize, f: &SpeciesField) -> Result<SpeciesField> {
        match self.get(k) {
            Some(s) => {
                let mut out = s.b.apply_field(f)?;
                for (o, (x, nu)) in out.as_mut_slice().iter_mut().zip(f.as_slice().iter().zip(&s.nu)) {
                    *o -= nu * x;
                }
                Ok(out)
            }
            None => Ok(SpeciesField::zeros(f.n_species(), f.n_points())),
        }
    }
}

/// `∂^n G(f) = A(∂^n f) + (B - ν)(∂^n f) + Σ_{k≥1} C(n,k) [A_{b^k} + B_{b^k} - ∂^k ν](∂^{n-k} f)`
/// in the homogeneous additive setting.
pub fn leibniz_g_with(splits: &SplitSet, derivs: &[SpeciesField], n: usize) -> Result<SpeciesField> {
    if n > splits.order() || n >= derivs.len() {
        return Err(Error::DerivativeOrder {
            requested: n,
            max: splits.order().min(derivs.len().saturating_sub(1)),
        });
    }
    let mut out = SpeciesField::zeros(derivs[0].n_species(), derivs[0].n_points());
    for k in 0..=n {
        let f = &derivs[n - k];
        let c = binomial(n, k);
        out.axpy(c, &splits.a(k, f)?);
        out.axpy(c, &splits.b_minus_nu(k, f)?);
    }
    Ok(out)
}

pub fn leibniz_g(
    ws: &CollisionWorkspace,
    model: &KernelModel,
    species: &SpeciesSet,
    params: &TruncationParams,
    state: &SensitivityState,
    n: usize,
) -> Result<SpeciesField> {
    if n > state.order {
        return Err(Error::DerivativeOrder {
            requested: n,
            max: state.order,
        });
    }
    let splits = SplitSet::new(ws, model, species, params, state.z, n)?;
    leibniz_g_with(&splits, &state.derivs, n)
}

/// Time stepping of the derivative hierarchy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityOptions {
    pub dt: f64,
    pub t_end: f64,
    pub scheme: TimeScheme,
    pub form: PerturbationForm,
    pub nonlinear: bool,
    pub conservative: bool,
    pub k_weight: f64,
    pub output_stride: usize,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            dt: 0.05,
            t_end: 10.0,
            scheme: TimeScheme::Rk4,
            form: PerturbationForm::Additive,
            nonlinear: true,
            conservative: true,
            k_weight: 0.0,
            output_stride: 10,
        }
    }
}

impl SensitivityOptions {
    fn validate(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.t_end >= self.dt) {
            return Err(Error::invalid("dt", "need 0 < dt <= t_end"));
        }
        if self.output_stride == 0 {
            return Err(Error::invalid("output_stride", "must be at least 1"));
        }
        Ok((self.t_end / self.dt).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRun {
    pub times: Vec<f64>,
    /// `norms[n][s] = ‖∂^n f(t_s)‖_{L¹(⟨v⟩^k)}`
    pub norms: Vec<Vec<f64>>,
    pub states: Vec<SensitivityState>,
    pub fits: Vec<Option<DecayFit>>,
}

fn l1k(grid: &VelocityGrid, f: &SpeciesField, k: f64) -> f64 {
    weighted_norm(grid, f, k, NormKind::L1Poly).expect("field on grid")
}

/// Joint evolution of `∂^n f`, `n = 0..=r`, solving orders in ascending
/// order within each stage.
pub fn evolve_sensitivities(problem: &Problem, state0: &SensitivityState, opts: &SensitivityOptions) -> Result<SensitivityRun> {
    let steps = opts.validate()?;
    let h = Hierarchy::new(problem, state0.z, state0.order, opts.form, opts.nonlinear, opts.conservative)?;
    let grid = problem.grid();
    let mut x = h.pack(&state0.derivs);
    let initial_max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut run = SensitivityRun {
        times: Vec::new(),
        norms: vec![Vec::new(); state0.order + 1],
        states: Vec::new(),
        fits: Vec::new(),
    };
    let record = |t: f64, x: &[f64], run: &mut SensitivityRun| -> Result<()> {
        let derivs = h.unpack(x)?;
        run.times.push(t);
        for (n, d) in derivs.iter().enumerate() {
            run.norms[n].push(l1k(grid, d, opts.k_weight));
        }
        run.states.push(SensitivityState {
            order: state0.order,
            derivs,
            z: state0.z,
            t,
        });
        Ok(())
    };
    record(0.0, &x, &mut run)?;
    for s in 1..=steps {
        advance(&h, opts.scheme, opts.dt, &mut x)?;
        let t = s as f64 * opts.dt;
        let norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !norm.is_finite() || (initial_max > 0.0 && norm > 1e6 * initial_max) {
            return Err(Error::BlowUp {
                t,
                norm,
                limit: 1e6 * initial_max,
            });
        }
        if s % opts.output_stride == 0 || s == steps {
            record(t, &x, &mut run)?;
        }
    }
    run.fits = run.norms.iter().map(|n| fit_decay(&run.times, n).ok()).collect();
    Ok(run)
}

/// Right-hand side of `(∂^0 f, …, ∂^n f, g1, g2)`.
struct DecompositionRhs<'a> {
    h: Hierarchy<'a>,
    splits: SplitSet,
    n: usize,
    field: usize,
    stiff: Vec<f64>,
}

impl BlockRhs for DecompositionRhs<'_> {
    fn block(&self) -> usize {
        (self.n + 3) * self.field
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let direct_len = (n + 1) * self.field;
        let derivs = self.h.unpack(&x[..direct_len])?;
        let (ns, np) = (derivs[0].n_species(), derivs[0].n_points());
        let g1 = SpeciesField::from_values(ns, np, x[direct_len..direct_len + self.field].to_vec())?;
        let g2 = SpeciesField::from_values(ns, np, x[direct_len + self.field..].to_vec())?;
        let mut out = self.h.pack(&self.h.rhs_fields(&derivs)?);
        let (r1, r2) = decomposition_sources(&self.h, &self.splits, n, &derivs, &g1, &g2)?;
        out.extend_from_slice(r1.as_slice());
        out.extend_from_slice(r2.as_slice());
        Ok(out)
    }

    fn stiff(&self) -> &[f64] {
        &self.stiff
    }
}

/// `(d g1/dt, d g2/dt)` given the exact lower orders.
fn decomposition_sources(
    h: &Hierarchy<'_>,
    splits: &SplitSet,
    n: usize,
    derivs: &[SpeciesField],
    g1: &SpeciesField,
    g2: &SpeciesField,
) -> Result<(SpeciesField, SpeciesField)> {
    let mut r1 = splits.b_minus_nu(0, g1)?;
    let mut r2 = h
        .lin(0)
        .map(|l| l.apply_field(g2))
        .transpose()?
        .unwrap_or_else(|| SpeciesField::zeros(g2.n_species(), g2.n_points()));
    r2.axpy(1.0, &splits.a(0, g1)?);
    for k in 1..=n {
        let c = binomial(n, k);
        r1.axpy(c, &splits.b_minus_nu(k, &derivs[n - k])?);
        r2.axpy(c, &splits.a(k, &derivs[n - k])?);
    }
    if let Some(q) = quadratic_source(h, n, derivs, &g1.add(g2))? {
        r1.axpy(1.0, &q);
    }
    Ok((r1, r2))
}

/// `Q(g, g)` for `n = 0`, `2 Q̃(g, f) + Term⋆` otherwise; `None` for the
/// linearized equation.
fn quadratic_source(h: &Hierarchy<'_>, n: usize, derivs: &[SpeciesField], g: &SpeciesField) -> Result<Option<SpeciesField>> {
    if !h.nonlinear() {
        return Ok(None);
    }
    let Some(t0) = h.table(0) else {
        return Ok(Some(SpeciesField::zeros(g.n_species(), g.n_points())));
    };
    let ws = h.workspace();
    Ok(Some(if n == 0 {
        q_bilinear(ws, t0, g, g)?
    } else {
        let mut q = q_tilde(ws, t0, g, &derivs[0])?;
        q.scale(2.0);
        q.axpy(1.0, &term_star_with(ws, h.tables(), derivs, n)?);
        q
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub times: Vec<f64>,
    pub g1_norm: Vec<f64>,
    pub g2_norm: Vec<f64>,
    /// `‖g1 + g2 - ∂^n f‖_{L¹(⟨v⟩^k)} / ‖∂^n f_0‖_{L¹(⟨v⟩^k)}`
    pub residual: Vec<f64>,
    pub g1: SpeciesField,
    pub g2: SpeciesField,
}

impl Decomposition {
    pub fn max_residual(&self) -> f64 {
        self.residual.iter().cloned().fold(0.0, f64::max)
    }
}

fn require_additive(opts: &SensitivityOptions) -> Result<()> {
    if opts.form != PerturbationForm::Additive {
        return Err(Error::invalid("form", "the A/B decomposition is defined for the additive form"));
    }
    Ok(())
}

/// Co-evolves `g1` (the part driven by `B - ν` and the quadratic terms,
/// `g1(0) = ∂^n f_0`) and `g2` (driven by `A`, `g2(0) = 0`) next to the
/// direct hierarchy. No conservative correction is applied on either path.
pub fn decompose_g1_g2(problem: &Problem, params: &TruncationParams, state0: &SensitivityState, n: usize, opts: &SensitivityOptions) -> Result<Decomposition> {
    require_additive(opts)?;
    if n > state0.order {
        return Err(Error::DerivativeOrder {
            requested: n,
            max: state0.order,
        });
    }
    let steps = opts.validate()?;
    let h = Hierarchy::new(problem, state0.z, n, opts.form, opts.nonlinear, false)?;
    let splits = SplitSet::new(&problem.ws, &problem.model, &problem.species, params, state0.z, n)?;
    let field = state0.derivs[0].as_slice().len();
    let stiff = h.nu(0).as_slice().repeat(n + 3);
    let rhs = DecompositionRhs { h, splits, n, field, stiff };
    let mut x = rhs.h.pack(&state0.derivs[..=n]);
    x.extend_from_slice(state0.derivs[n].as_slice());
    x.extend(std::iter::repeat_n(0.0, field));
    let grid = problem.grid();
    let k = opts.k_weight;
    let scale = {
        let s = l1k(grid, &state0.derivs[n], k);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let ns = state0.derivs[0].n_species();
    let np = state0.derivs[0].n_points();
    let split = |x: &[f64]| -> Result<(SpeciesField, SpeciesField, SpeciesField)> {
        let o = (n + 1) * field;
        Ok((
            SpeciesField::from_values(ns, np, x[n * field..o].to_vec())?,
            SpeciesField::from_values(ns, np, x[o..o + field].to_vec())?,
            SpeciesField::from_values(ns, np, x[o + field..].to_vec())?,
        ))
    };
    let mut out = Decomposition {
        times: Vec::new(),
        g1_norm: Vec::new(),
        g2_norm: Vec::new(),
        residual: Vec::new(),
        g1: SpeciesField::zeros(ns, np),
        g2: SpeciesField::zeros(ns, np),
    };
    let record = |t: f64, x: &[f64], out: &mut Decomposition| -> Result<()> {
        let (d, g1, g2) = split(x)?;
        out.times.push(t);
        out.g1_norm.push(l1k(grid, &g1, k));
        out.g2_norm.push(l1k(grid, &g2, k));
        out.residual.push(l1k(grid, &g1.add(&g2).sub(&d), k) / scale);
        out.g1 = g1;
        out.g2 = g2;
        Ok(())
    };
    record(0.0, &x, &mut out)?;
    for s in 1..=steps {
        advance(&rhs, opts.scheme, opts.dt, &mut x)?;
        if s % opts.output_stride == 0 || s == steps {
            record(s as f64 * opts.dt, &x, &mut out)?;
        }
    }
    Ok(out)
}

/// Weights of `∫_0^{dt} e^{-r(dt - s)} p(s) ds` for the cubic interpolant
/// `p` through four consecutive time nodes, for each of the three positions
/// of the integration interval inside the stencil.
struct ExpWeights {
    w: Vec<[[f64; 4]; 3]>,
}

impl ExpWeights {
    fn new(rates: &[f64], dt: f64) -> Result<Self> {
        let rule = gauss_legendre_on(8, 0.0, dt)?;
        let lagrange: Vec<[[f64; 4]; 3]> = (0..rule.len())
            .map(|g| {
                let s = rule.nodes[g];
                let mut l = [[0.0; 4]; 3];
                for (o, lo) in l.iter_mut().enumerate() {
                    let tau: Vec<f64> = (0..4).map(|j| (j as f64 - o as f64) * dt).collect();
                    for j in 0..4 {
                        let mut v = 1.0;
                        for i in 0..4 {
                            if i != j {
                                v *= (s - tau[i]) / (tau[j] - tau[i]);
                            }
                        }
                        lo[j] = v;
                    }
                }
                l
            })
            .collect();
        let w = rates
            .iter()
            .map(|r| {
                let mut out = [[0.0; 4]; 3];
                for (g, l) in lagrange.iter().enumerate() {
                    let e = rule.weights[g] * (-r * (dt - rule.nodes[g])).exp();
                    for o in 0..3 {
                        for j in 0..4 {
                            out[o][j] += e * l[o][j];
                        }
                    }
                }
                out
            })
            .collect();
        Ok(Self { w })
    }
}

/// First stencil node and position for interval `m` of `intervals`.
fn stencil(m: usize, intervals: usize) -> (usize, usize) {
    let s0 = (m.max(1) - 1).min(intervals - 3);
    (s0, m - s0)
}

/// One exponential-quadrature sweep `u_{m+1} = e^{-r dt} u_m + Σ_j W_j N_{s0+j}`
/// along a trajectory, per component.
fn duhamel_sweep(u0: &[f64], decay: &[f64], weights: &ExpWeights, sources: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let intervals = sources.len() - 1;
    let mut out = Vec::with_capacity(sources.len());
    out.push(u0.to_vec());
    for m in 0..intervals {
        let (s0, o) = stencil(m, intervals);
        let prev = &out[m];
        let next: Vec<f64> = (0..u0.len())
            .map(|c| {
                let w = &weights.w[c][o];
                decay[c] * prev[c] + (0..4).map(|j| w[j] * sources[s0 + j][c]).sum::<f64>()
            })
            .collect();
        out.push(next);
    }
    out
}

/// Measured smallness constants of the contraction criterion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionProxy {
    /// `max ‖Q̃(a, b)‖_{L¹(⟨v⟩^k)} / (‖a‖_{L¹(⟨v⟩^k ν)} ‖b‖_{L¹(⟨v⟩^k)})` over probes.
    pub c_q: f64,
    pub c_b: f64,
    /// `∫_0^T ‖f(t)‖_{L¹(⟨v⟩^k)} dt` of the zeroth order.
    pub tau1: f64,
    /// `sup_t ‖f(t)‖_{L¹(⟨v⟩^k)}` of the zeroth order.
    pub tau2: f64,
    /// `max{4 C_Q τ1, 2 (C_B + 2 C_Q τ2)}`
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardReport {
    pub times: Vec<f64>,
    /// `sup_t ‖g1^{(p+1)} - g1^{(p)}‖_{L¹(⟨v⟩^k)}` for `p = 0, 1, …`
    pub increments: Vec<f64>,
    /// `ρ_p = increments[p] / increments[p - 1]`, `p ≥ 1`.
    pub ratios: Vec<f64>,
    /// `g1^{(p)}(T)` for every iterate.
    pub final_iterates: Vec<SpeciesField>,
    pub converged: bool,
    /// `sup_t ‖g1 + g2 - ∂^n f‖ / ‖∂^n f_0‖` at the last iterate, against the
    /// time-stepped hierarchy.
    pub fixed_point_error: f64,
    pub proxy: ContractionProxy,
    /// Some ratio `ρ_p`, `p ≥ 2`, reached 1 before convergence.
    pub regime_exit: bool,
}

/// Picard iteration on `g1` over `[0, t_end]`:
/// `g1^{(p+1)}(t) = e^{-νt} g1(0) + ∫_0^t e^{-ν(t-s)} N[g1^{(p)}, g2^{(p)}](s) ds`,
/// with `g2^{(p)}` solving `∂_t g2 = L g2 + A g1^{(p)} + Σ C(n,k) A_{b^k} ∂^{n-k} f`
/// exactly through the eigen-decomposition of `L`, `g1^{(0)} = 0`, and the
/// lower orders taken from the time-stepped hierarchy.
pub fn duhamel_picard(
    problem: &Problem,
    params: &TruncationParams,
    state0: &SensitivityState,
    n: usize,
    opts: &SensitivityOptions,
    n_iters: usize,
) -> Result<PicardReport> {
    require_additive(opts)?;
    if n > state0.order {
        return Err(Error::DerivativeOrder {
            requested: n,
            max: state0.order,
        });
    }
    let steps = opts.validate()?;
    if steps < 3 {
        return Err(Error::invalid("t_end", "the Picard quadrature needs at least three steps"));
    }
    let grid = problem.grid();
    let k = opts.k_weight;
    let dt = opts.dt;
    let h = Hierarchy::new(problem, state0.z, n, opts.form, opts.nonlinear, false)?;
    let splits = SplitSet::new(&problem.ws, &problem.model, &problem.species, params, state0.z, n)?;
    let (ns, np) = (state0.derivs[0].n_species(), state0.derivs[0].n_points());
    let field = ns * np;

    // direct trajectory of the lower orders and the reference ∂^n f
    let mut x = h.pack(&state0.derivs[..=n]);
    let mut traj = vec![h.unpack(&x)?];
    for _ in 0..steps {
        advance(&h, TimeScheme::Rk4, dt, &mut x)?;
        traj.push(h.unpack(&x)?);
    }
    let times: Vec<f64> = (0..=steps).map(|s| s as f64 * dt).collect();

    let mut src_b = Vec::with_capacity(steps + 1);
    let mut src_a = Vec::with_capacity(steps + 1);
    for d in &traj {
        let mut b = SpeciesField::zeros(ns, np);
        let mut a = SpeciesField::zeros(ns, np);
        for kk in 1..=n {
            let c = binomial(n, kk);
            b.axpy(c, &splits.b_minus_nu(kk, &d[n - kk])?);
            a.axpy(c, &splits.a(kk, &d[n - kk])?);
        }
        src_b.push(b);
        src_a.push(a);
    }

    // exact propagator of L = D S D^{-1}, D = diag(√M), S symmetric
    let l0 = h.lin(0).ok_or_else(|| Error::invalid("kernel", "the zeroth-order kernel vanishes"))?;
    let s = l0.l2_form();
    let s = (&s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let v: DMatrix<f64> = eig.eigenvectors;
    let lambda: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    let sqrt_m: Vec<f64> = l0.maxwellian.as_ref().expect("additive form").iter().map(|m| m.sqrt()).collect();
    let to_modal = |f: &SpeciesField| -> Vec<f64> {
        let y = DVector::from_iterator(field, f.as_slice().iter().zip(&sqrt_m).map(|(a, s)| a / s));
        (v.transpose() * y).iter().cloned().collect()
    };
    let from_modal = |y: &[f64]| -> SpeciesField {
        let f = &v * DVector::from_column_slice(y);
        SpeciesField::from_values(ns, np, f.iter().zip(&sqrt_m).map(|(a, s)| a * s).collect()).expect("sized")
    };
    let l_rates: Vec<f64> = lambda.iter().map(|l| -l).collect();
    let l_weights = ExpWeights::new(&l_rates, dt)?;
    let l_decay: Vec<f64> = l_rates.iter().map(|r| (-r * dt).exp()).collect();

    let nu0 = h.nu(0).as_slice().to_vec();
    let nu_weights = ExpWeights::new(&nu0, dt)?;
    let nu_decay: Vec<f64> = nu0.iter().map(|r| (-r * dt).exp()).collect();

    let g0 = state0.derivs[n].clone();
    let scale = {
        let s = l1k(grid, &g0, k);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let solve_g2 = |g1: &[SpeciesField]| -> Result<Vec<SpeciesField>> {
        let sources: Vec<Vec<f64>> = g1
            .iter()
            .zip(&src_a)
            .map(|(g, a)| Ok(to_modal(&splits.a(0, g)?.add(a))))
            .collect::<Result<_>>()?;
        let y = duhamel_sweep(&vec![0.0; field], &l_decay, &l_weights, &sources);
        Ok(y.iter().map(|y| from_modal(y)).collect())
    };

    let mut g1: Vec<SpeciesField> = vec![SpeciesField::zeros(ns, np); steps + 1];
    let mut g2 = solve_g2(&g1)?;
    let mut increments = Vec::new();
    let mut final_iterates = vec![g1[steps].clone()];
    let mut converged = false;
    for _ in 0..n_iters {
        let sources: Vec<Vec<f64>> = (0..=steps)
            .map(|m| {
                let mut nsrc = splits.b_minus_nu(0, &g1[m])?;
                // The -ν part is integrated exactly.
                for (o, (x, nu)) in nsrc.as_mut_slice().iter_mut().zip(g1[m].as_slice().iter().zip(&nu0)) {
                    *o += nu * x;
                }
                nsrc.axpy(1.0, &src_b[m]);
                if let Some(q) = quadratic_source(&h, n, &traj[m], &g1[m].add(&g2[m]))? {
                    nsrc.axpy(1.0, &q);
                }
                Ok(nsrc.into_values())
            })
            .collect::<Result<_>>()?;
        let next = duhamel_sweep(g0.as_slice(), &nu_decay, &nu_weights, &sources);
        let next: Vec<SpeciesField> = next.into_iter().map(|u| SpeciesField::from_values(ns, np, u)).collect::<Result<_>>()?;
        let inc = next.iter().zip(&g1).map(|(a, b)| l1k(grid, &a.sub(b), k)).fold(0.0, f64::max);
        increments.push(inc);
        g1 = next;
        g2 = solve_g2(&g1)?;
        final_iterates.push(g1[steps].clone());
        if inc <= 1e-13 * scale {
            converged = true;
            break;
        }
    }
    let ratios: Vec<f64> = increments.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
    let regime_exit = ratios.iter().skip(1).any(|r| *r >= 1.0);
    let fixed_point_error = (0..=steps)
        .map(|m| l1k(grid, &g1[m].add(&g2[m]).sub(&traj[m][n]), k) / scale)
        .fold(0.0, f64::max);

    let order0: Vec<f64> = traj.iter().map(|d| l1k(grid, &d[0], k)).collect();
    let proxy = contraction_proxy(problem, &h, &splits, &order0, dt, k)?;
    Ok(PicardReport {
        times,
        increments,
        ratios,
        final_iterates,
        converged,
        fixed_point_error,
        proxy,
        regime_exit,
    })
}

fn contraction_proxy(problem: &Problem, h: &Hierarchy<'_>, splits: &SplitSet, order0: &[f64], dt: f64, k: f64) -> Result<ContractionProxy> {
    let grid = problem.grid();
    let c_b = match splits.get(0) {
        Some(s) => estimate_operator_constants(grid, &problem.species, s, &[k], 0.0, 100, 7)?.rows[0].c_b_hat,
        None => 0.0,
    };
    let nu = h.nu(0);
    let c_q = match h.table(0) {
        Some(t0) => {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let ns = problem.species.len();
            let np = grid.len();
            let mut best: f64 = 0.0;
            for _ in 0..40 {
                let a = SpeciesField::from_values(ns, np, (0..ns * np).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
                let b = SpeciesField::from_values(ns, np, (0..ns * np).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
                let q = q_tilde(&problem.ws, t0, &a, &b)?;
                let den = weighted_norm(grid, &a, k, NormKind::L1PolyNu { nu: Some(nu) })? * l1k(grid, &b, k);
                if den > 0.0 {
                    best = best.max(l1k(grid, &q, k) / den);
                }
            }
            best
        }
        None => 0.0,
    };
    let tau1 = order0.windows(2).map(|w| 0.5 * dt * (w[0] + w[1])).sum::<f64>();
    let tau2 = order0.iter().cloned().fold(0.0, f64::max);
    Ok(ContractionProxy {
        c_q,
        c_b,
        tau1,
        tau2,
        value: (4.0 * c_q * tau1).max(2.0 * (c_b + 2.0 * c_q * tau2)),
    })
}

/// Least-squares fit of `log y = log C - λ t` over the tail half of a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub c_hat: f64,
    pub lambda_hat: f64,
    pub r_squared: f64,
    /// `λ̂` is positive beyond roundoff.
    pub decaying: bool,
    /// Non-positive values in the tail were dropped.
    pub positive_subset: bool,
}

pub fn fit_decay(times: &[f64], values: &[f64]) -> Result<DecayFit> {
    if times.len() != values.len() {
        return Err(Error::Mismatch("times and values differ in length".into()));
    }
    if times.len() < 10 {
        return Err(Error::invalid("series", "at least 10 samples are required"));
    }
    let tail = times.len() / 2;
    let pts: Vec<(f64, f64)> = times[tail..]
        .iter()
        .zip(&values[tail..])
        .filter(|(_, y)| **y > 0.0 && y.is_finite())
        .map(|(t, y)| (*t, y.ln()))
        .collect();
    let positive_subset = pts.len() < times.len() - tail;
    if pts.len() < 2 {
        return Err(Error::invalid("series", "fewer than two positive values in the tail"));
    }
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let stt = pts.iter().map(|p| (p.0 - tm).powi(2)).sum::<f64>();
    let sty = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum::<f64>();
    if stt == 0.0 {
        return Err(Error::invalid("series", "tail times are all equal"));
    }
    let slope = sty / stt;
    let icept = ym - slope * tm;
    let syy = pts.iter().map(|p| (p.1 - ym).powi(2)).sum::<f64>();
    let sres = pts.iter().map(|p| (p.1 - icept - slope * p.0).powi(2)).sum::<f64>();
    let r_squared = if syy > 0.0 { 1.0 - sres / syy } else { 1.0 };
    let lambda_hat = -slope;
    Ok(DecayFit {
        c_hat: icept.exp(),
        lambda_hat,
        r_squared,
        decaying: lambda_hat > 1e-10 * (1.0 + ym.abs()),
        positive_subset,
    })
}
