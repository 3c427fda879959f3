//! Time integration of the perturbation equation `∂_t f + v·∇_x f = L f + Q(f)`
//! in the space-homogeneous setting and on a periodic 1-D torus, for a fixed
//! `z`, for collocation node sets and for stochastic Galerkin coefficients.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::collision::{collision_frequency_with, CollisionWorkspace, KernelTable, NuConvention};
use crate::error::{Error, Result};
use crate::gpc::{build_basis, GpcBasis, GpcField, Measure, SgOperator};
use crate::grid::{maxwellian, moments, weighted_norm, InvariantProjector, MomentReport, NormKind, PerturbationForm, SpeciesField, SpeciesSet, VelocityGrid};
use crate::kernel::KernelModel;
use crate::linop::{assemble_linearized, AssembledOperator};
use crate::sensitivity::{binomial, fit_decay, leibniz_q_with, DecayFit};

/// Grid, species, kernel and the collision geometry shared by every run.
pub struct Problem {
    pub species: SpeciesSet,
    pub model: KernelModel,
    pub ws: CollisionWorkspace,
}

impl Problem {
    pub fn new(grid: &VelocityGrid, species: SpeciesSet, model: KernelModel) -> Result<Self> {
        model.check_species(&species)?;
        Ok(Self {
            ws: CollisionWorkspace::new(grid),
            species,
            model,
        })
    }

    pub fn grid(&self) -> &VelocityGrid {
        self.ws.grid()
    }

    pub fn maxwellian(&self) -> SpeciesField {
        maxwellian(self.grid(), &self.species)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialMode {
    Homogeneous,
    /// `x ∈ [0, period)` on `nx` cells, transported along `v_1`.
    Torus1d {
        nx: usize,
        period: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Unknown {
    Deterministic {
        z: f64,
    },
    /// Independent runs at each node; see [`collocation_reference`].
    Collocation {
        nodes: Vec<f64>,
    },
    /// `K` Galerkin modes; `q` weights the reported mode norms by `k^{2q}`.
    Sg {
        k: usize,
        q: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeScheme {
    #[default]
    Rk4,
    /// Exact integrating factor on `-ν`, explicit Euler on the rest.
    ExpEuler,
}

/// Initial perturbation
/// `f_0,i(x, v, z) = a e^{ρ z} (1 + i/2) exp(-|v - c|² / 2w²) (x_0 + sin(2π m x / X))`,
/// optionally projected onto the microscopic subspace. In the sqrt-weighted
/// form the same profile is used for `g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub amplitude: f64,
    pub shift: [f64; 3],
    pub width: f64,
    /// `ρ`; `∂_z^n f_0 = ρ^n f_0`.
    pub z_rate: f64,
    pub x_offset: f64,
    pub x_wavenumber: u32,
    pub microscopic: bool,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            amplitude: 1e-3,
            shift: [0.5, -0.25, 0.0],
            width: 1.0,
            z_rate: 0.5,
            x_offset: 1.0,
            x_wavenumber: 1,
            microscopic: true,
        }
    }
}

impl PerturbationSpec {
    /// Velocity profile of `∂_z^n f_0` at `z` (before projection).
    pub fn velocity_profile(&self, grid: &VelocityGrid, n_species: usize, z: f64, n: usize) -> SpeciesField {
        let scale = self.amplitude * (self.z_rate * z).exp() * self.z_rate.powi(n as i32);
        let w2 = 2.0 * self.width * self.width;
        SpeciesField::from_fn(grid, n_species, |i, v| {
            let d2: f64 = (0..3).map(|a| (v[a] - self.shift[a]).powi(2)).sum();
            scale * (1.0 + 0.5 * i as f64) * (-d2 / w2).exp()
        })
    }

    pub fn x_profile(&self, x: f64, period: f64) -> f64 {
        self.x_offset + (2.0 * std::f64::consts::PI * self.x_wavenumber as f64 * x / period).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub mode: SpatialMode,
    pub unknown: Unknown,
    pub scheme: TimeScheme,
    pub form: PerturbationForm,
    /// Include `Q(f)`; otherwise the linearized equation is solved.
    pub nonlinear: bool,
    /// Remove the collision-invariant component of every stage.
    pub conservative: bool,
    pub dt: f64,
    pub t_end: f64,
    pub output_stride: usize,
    /// Polynomial weight `k` of the reported `L¹(⟨v⟩^k)` norms.
    pub k_weight: f64,
    pub init: PerturbationSpec,
    /// Law of `z` for Galerkin runs.
    pub measure: Measure,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: SpatialMode::Homogeneous,
            unknown: Unknown::Deterministic { z: 0.0 },
            scheme: TimeScheme::Rk4,
            form: PerturbationForm::Additive,
            nonlinear: false,
            conservative: true,
            dt: 0.05,
            t_end: 10.0,
            output_stride: 10,
            k_weight: 0.0,
            init: PerturbationSpec::default(),
            measure: Measure::Uniform { c_z: 1.0 },
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if !(self.t_end >= self.dt) {
            return Err(Error::invalid("t_end", "must be at least dt"));
        }
        if self.output_stride == 0 {
            return Err(Error::invalid("output_stride", "must be at least 1"));
        }
        if !(self.k_weight >= 0.0) {
            return Err(Error::invalid("k_weight", "must be non-negative"));
        }
        if let SpatialMode::Torus1d { nx, period } = self.mode {
            if nx < 8 {
                return Err(Error::invalid("nx", "the torus needs at least 8 cells"));
            }
            if !(period > 0.0) {
                return Err(Error::invalid("period", "must be positive"));
            }
        }
        match &self.unknown {
            Unknown::Sg { k, .. } if *k == 0 => Err(Error::invalid("K", "at least one mode is required")),
            Unknown::Collocation { nodes } if nodes.is_empty() => Err(Error::invalid("nodes", "collocation needs at least one node")),
            _ => Ok(()),
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    fn nx(&self) -> usize {
        match self.mode {
            SpatialMode::Homogeneous => 1,
            SpatialMode::Torus1d { nx, .. } => nx,
        }
    }
}

/// Collision right-hand side acting on one spatial cell.
pub trait BlockRhs: Sync {
    fn block(&self) -> usize;
    /// `d/dt x` for the cell values `x`.
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Diagonal damping treated exactly by [`TimeScheme::ExpEuler`].
    fn stiff(&self) -> &[f64];
    /// Applied to the increment of an exponential step.
    fn correct(&self, _increment: &mut [f64]) {}
}

/// One collision step of `x` in place.
pub fn advance(rhs: &dyn BlockRhs, scheme: TimeScheme, dt: f64, x: &mut [f64]) -> Result<()> {
    match scheme {
        TimeScheme::Rk4 => {
            let k1 = rhs.eval(x)?;
            let y: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k2 = rhs.eval(&y)?;
            let y: Vec<f64> = x.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k3 = rhs.eval(&y)?;
            let y: Vec<f64> = x.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
            let k4 = rhs.eval(&y)?;
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        TimeScheme::ExpEuler => {
            let r = rhs.eval(x)?;
            let s = rhs.stiff();
            let mut inc: Vec<f64> = x
                .iter()
                .zip(&r)
                .zip(s)
                .map(|((xi, ri), si)| {
                    let a = si * dt;
                    let phi1 = if a.abs() < 1e-300 { 1.0 } else { -(-a).exp_m1() / a };
                    let n = ri + si * xi;
                    (-a).exp_m1() * xi + dt * phi1 * n
                })
                .collect();
            rhs.correct(&mut inc);
            for (xi, d) in x.iter_mut().zip(&inc) {
                *xi += d;
            }
        }
    }
    Ok(())
}

/// `∂_t ∂^n f = Σ_k C(n,k) L_{b^k}(∂^{n-k} f) + ∂^n Q(f)` for `n = 0..=r`,
/// values ordered order-major, then species, then point.
pub struct Hierarchy<'a> {
    order: usize,
    form: PerturbationForm,
    nonlinear: bool,
    n_species: usize,
    n_points: usize,
    ws: &'a CollisionWorkspace,
    lin: Vec<Option<AssembledOperator>>,
    tables: Vec<Option<KernelTable>>,
    nu: Vec<SpeciesField>,
    sqrt_m: Vec<f64>,
    projector: Option<InvariantProjector>,
    stiff: Vec<f64>,
}

impl<'a> Hierarchy<'a> {
    pub fn new(problem: &'a Problem, z: f64, order: usize, form: PerturbationForm, nonlinear: bool, conservative: bool) -> Result<Self> {
        let ws = &problem.ws;
        let m = problem.maxwellian();
        let (n, np) = (problem.species.len(), ws.grid().len());
        let mut lin = Vec::with_capacity(order + 1);
        let mut tables = Vec::with_capacity(order + 1);
        let mut nu = Vec::with_capacity(order + 1);
        for k in 0..=order {
            let table = KernelTable::at(ws, &problem.model, z, k)?;
            if table.is_zero() {
                lin.push(None);
                tables.push(None);
                nu.push(SpeciesField::zeros(n, np));
            } else {
                lin.push(Some(assemble_linearized(ws, &table, &problem.species, form)?));
                nu.push(collision_frequency_with(ws, &table, &m, NuConvention::Standard)?);
                tables.push(Some(table));
            }
        }
        let stiff = nu[0].as_slice().repeat(order + 1);
        Ok(Self {
            order,
            form,
            nonlinear,
            n_species: n,
            n_points: np,
            ws,
            lin,
            tables,
            nu,
            sqrt_m: m.as_slice().iter().map(|x| x.sqrt()).collect(),
            projector: if conservative {
                Some(InvariantProjector::new(ws.grid(), &problem.species, form)?)
            } else {
                None
            },
            stiff,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn form(&self) -> PerturbationForm {
        self.form
    }

    pub fn nonlinear(&self) -> bool {
        self.nonlinear
    }

    pub fn workspace(&self) -> &'a CollisionWorkspace {
        self.ws
    }

    /// `L_{b^k}`; `None` when the `k`-th kernel derivative vanishes.
    pub fn lin(&self, k: usize) -> Option<&AssembledOperator> {
        self.lin[k].as_ref()
    }

    pub fn table(&self, k: usize) -> Option<&KernelTable> {
        self.tables[k].as_ref()
    }

    pub fn tables(&self) -> &[Option<KernelTable>] {
        &self.tables
    }

    /// `∂^k ν`
    pub fn nu(&self, k: usize) -> &SpeciesField {
        &self.nu[k]
    }

    pub fn projector(&self) -> Option<&InvariantProjector> {
        self.projector.as_ref()
    }

    fn field_size(&self) -> usize {
        self.n_species * self.n_points
    }

    /// Splits order-major values into one field per order.
    pub fn unpack(&self, x: &[f64]) -> Result<Vec<SpeciesField>> {
        if x.len() != self.block() {
            return Err(Error::Mismatch("state length differs from the hierarchy".into()));
        }
        x.chunks(self.field_size())
            .map(|c| SpeciesField::from_values(self.n_species, self.n_points, c.to_vec()))
            .collect()
    }

    pub fn pack(&self, fields: &[SpeciesField]) -> Vec<f64> {
        fields.iter().flat_map(|f| f.as_slice().iter().cloned()).collect()
    }

    /// Physical perturbation `f` from the form variable.
    pub fn to_plain(&self, f: &SpeciesField) -> SpeciesField {
        match self.form {
            PerturbationForm::Additive => f.clone(),
            PerturbationForm::SqrtWeighted => {
                let mut out = f.clone();
                for (x, s) in out.as_mut_slice().iter_mut().zip(&self.sqrt_m) {
                    *x *= s;
                }
                out
            }
        }
    }

    fn from_plain(&self, mut f: SpeciesField) -> SpeciesField {
        if self.form == PerturbationForm::SqrtWeighted {
            for (x, s) in f.as_mut_slice().iter_mut().zip(&self.sqrt_m) {
                *x /= s;
            }
        }
        f
    }

    /// `Σ_k C(n,k) L_{b^k}(∂^{n-k} f)`
    pub fn linear_part(&self, n: usize, derivs: &[SpeciesField]) -> Result<SpeciesField> {
        let mut out = SpeciesField::zeros(self.n_species, self.n_points);
        for k in 0..=n {
            if let Some(l) = &self.lin[k] {
                out.axpy(binomial(n, k), &l.apply_field(&derivs[n - k])?);
            }
        }
        Ok(out)
    }

    /// `∂^n Q(f)` in the form variable.
    pub fn nonlinear_part(&self, n: usize, derivs: &[SpeciesField]) -> Result<SpeciesField> {
        let plain: Vec<SpeciesField> = derivs[..=n].iter().map(|f| self.to_plain(f)).collect();
        let q = leibniz_q_with(self.ws, &self.tables, &plain, n)?;
        Ok(self.from_plain(q))
    }

    pub fn rhs_fields(&self, derivs: &[SpeciesField]) -> Result<Vec<SpeciesField>> {
        (0..=self.order)
            .map(|n| {
                let mut r = self.linear_part(n, derivs)?;
                if self.nonlinear {
                    r.axpy(1.0, &self.nonlinear_part(n, derivs)?);
                }
                Ok(match &self.projector {
                    Some(p) => p.complement(&r),
                    None => r,
                })
            })
            .collect()
    }
}

impl BlockRhs for Hierarchy<'_> {
    fn block(&self) -> usize {
        (self.order + 1) * self.field_size()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let derivs = self.unpack(x)?;
        Ok(self.pack(&self.rhs_fields(&derivs)?))
    }

    fn stiff(&self) -> &[f64] {
        &self.stiff
    }

    fn correct(&self, increment: &mut [f64]) {
        if let Some(p) = &self.projector {
            for c in increment.chunks_mut(self.field_size()) {
                let f = SpeciesField::from_values(self.n_species, self.n_points, c.to_vec()).expect("sized chunk");
                c.copy_from_slice(p.complement(&f).as_slice());
            }
        }
    }
}

/// Galerkin collision right-hand side on `GpcField` values.
struct SgRhs<'a> {
    problem: &'a Problem,
    sg: SgOperator,
    basis: GpcBasis,
    form: PerturbationForm,
    node_tables: Option<Vec<KernelTable>>,
    sqrt_m: Vec<f64>,
    projector: Option<InvariantProjector>,
    stiff: Vec<f64>,
}

impl<'a> SgRhs<'a> {
    fn new(problem: &'a Problem, basis: GpcBasis, form: PerturbationForm, nonlinear: bool, conservative: bool) -> Result<Self> {
        let ws = &problem.ws;
        let sg = SgOperator::with_form(ws, &problem.model, &basis, &problem.species, form)?;
        let m = problem.maxwellian();
        let node_tables = if nonlinear {
            Some(
                basis
                    .quadrature()
                    .nodes
                    .iter()
                    .map(|z| KernelTable::at(ws, &problem.model, *z, 0))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        // Damping of mode k: ν[b0] + C_kk ν[b1].
        let t0 = KernelTable::new(ws, &problem.model, crate::kernel::KernelMix::B0);
        let t1 = KernelTable::new(ws, &problem.model, crate::kernel::KernelMix::B1);
        let nu0 = collision_frequency_with(ws, &t0, &m, NuConvention::Standard)?;
        let nu1 = collision_frequency_with(ws, &t1, &m, NuConvention::Standard)?;
        let (n, kk, np) = (sg.n_species, sg.n_modes, sg.n_points);
        let mut stiff = Vec::with_capacity(n * kk * np);
        for i in 0..n {
            for k in 0..kk {
                let c = sg.coupling[(k, k)];
                stiff.extend(nu0.species(i).iter().zip(nu1.species(i)).map(|(a, b)| a + c * b));
            }
        }
        Ok(Self {
            problem,
            sg,
            basis,
            form,
            node_tables,
            sqrt_m: m.as_slice().iter().map(|x| x.sqrt()).collect(),
            projector: if conservative {
                Some(InvariantProjector::new(ws.grid(), &problem.species, form)?)
            } else {
                None
            },
            stiff,
        })
    }

    fn field(&self, x: &[f64]) -> Result<GpcField> {
        GpcField::from_values(self.sg.n_species, self.sg.n_modes, self.sg.n_points, x.to_vec())
    }

    fn project_modes(&self, f: &mut GpcField) {
        if let Some(p) = &self.projector {
            for k in 0..f.n_modes() {
                let c = p.complement(&f.mode(k));
                f.set_mode(k, &c);
            }
        }
    }

    /// `∫ Q_z(f^K(z)) ψ_k dπ` by the basis quadrature.
    fn galerkin_q(&self, f: &GpcField, tables: &[KernelTable]) -> Result<GpcField> {
        let quad = self.basis.quadrature();
        let mut modes = vec![SpeciesField::zeros(f.n_species(), f.n_points()); f.n_modes()];
        for ((z, w), table) in quad.nodes.iter().zip(&quad.weights).zip(tables) {
            let mut fz = f.evaluate(&self.basis, *z);
            if self.form == PerturbationForm::SqrtWeighted {
                for (x, s) in fz.as_mut_slice().iter_mut().zip(&self.sqrt_m) {
                    *x *= s;
                }
            }
            let mut q = crate::collision::q_bilinear(&self.problem.ws, table, &fz, &fz)?;
            if self.form == PerturbationForm::SqrtWeighted {
                for (x, s) in q.as_mut_slice().iter_mut().zip(&self.sqrt_m) {
                    *x /= s;
                }
            }
            for (m, pk) in modes.iter_mut().zip(self.basis.eval(*z)) {
                m.axpy(w * pk, &q);
            }
        }
        GpcField::from_modes(&modes)
    }
}

impl BlockRhs for SgRhs<'_> {
    fn block(&self) -> usize {
        self.sg.size()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.field(x)?;
        let mut out = self.sg.apply(&f)?;
        if let Some(tables) = &self.node_tables {
            out.axpy(1.0, &self.galerkin_q(&f, tables)?);
        }
        self.project_modes(&mut out);
        Ok(out.as_slice().to_vec())
    }

    fn stiff(&self) -> &[f64] {
        &self.stiff
    }

    fn correct(&self, increment: &mut [f64]) {
        if self.projector.is_some() {
            let mut f = self.field(increment).expect("sized increment");
            self.project_modes(&mut f);
            increment.copy_from_slice(f.as_slice());
        }
    }
}

/// Exact free transport `f(x - v_1 t, v)` by a Fourier shift in `x`.
struct Transport {
    nx: usize,
    period: f64,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    v1: Vec<f64>,
}

impl Transport {
    fn new(grid: &VelocityGrid, nx: usize, period: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nx,
            period,
            fft: planner.plan_fft_forward(nx),
            ifft: planner.plan_fft_inverse(nx),
            v1: grid.points().iter().map(|v| v[0]).collect(),
        }
    }

    fn apply(&self, data: &mut [f64], block: usize, dt: f64) {
        let nx = self.nx;
        let np = self.v1.len();
        let cols: Vec<Vec<f64>> = (0..block)
            .into_par_iter()
            .map(|e| {
                let mut buf: Vec<Complex<f64>> = (0..nx).map(|c| Complex::new(data[c * block + e], 0.0)).collect();
                self.fft.process(&mut buf);
                let shift = self.v1[e % np] * dt;
                for (m, b) in buf.iter_mut().enumerate() {
                    let freq = if m <= nx / 2 { m as f64 } else { m as f64 - nx as f64 };
                    let ang = -2.0 * std::f64::consts::PI * freq * shift / self.period;
                    *b *= Complex::new(ang.cos(), ang.sin());
                }
                self.ifft.process(&mut buf);
                buf.iter().map(|c| c.re / nx as f64).collect()
            })
            .collect();
        for (e, col) in cols.iter().enumerate() {
            for (c, v) in col.iter().enumerate() {
                data[c * block + e] = *v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Fields { n_species: usize, n_points: usize },
    Gpc { n_species: usize, n_modes: usize, n_points: usize },
}

/// Cell-major values of the unknown together with the current time.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub nx: usize,
    pub layout: Layout,
    pub data: Vec<f64>,
    /// Largest entry at `t = 0`, the reference of the blow-up check.
    pub initial_max: f64,
}

impl SimState {
    pub fn block(&self) -> usize {
        match self.layout {
            Layout::Fields { n_species, n_points } => n_species * n_points,
            Layout::Gpc { n_species, n_modes, n_points } => n_species * n_modes * n_points,
        }
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        let b = self.block();
        &self.data[c * b..(c + 1) * b]
    }

    /// Field of cell `c` (fixed-`z` layouts only).
    pub fn cell_field(&self, c: usize) -> Result<SpeciesField> {
        match self.layout {
            Layout::Fields { n_species, n_points } => SpeciesField::from_values(n_species, n_points, self.cell(c).to_vec()),
            Layout::Gpc { .. } => Err(Error::Mismatch("state holds gPC coefficients".into())),
        }
    }

    pub fn cell_gpc(&self, c: usize) -> Result<GpcField> {
        match self.layout {
            Layout::Gpc { n_species, n_modes, n_points } => GpcField::from_values(n_species, n_modes, n_points, self.cell(c).to_vec()),
            Layout::Fields { .. } => Err(Error::Mismatch("state holds plain fields".into())),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Series recorded by [`Simulator::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub times: Vec<f64>,
    /// `L¹_v(⟨v⟩^k) L^∞_x` norm of `(I - Π_G) f`.
    pub micro_norm: Vec<f64>,
    /// Same norm of `Π_G f`.
    pub hydro_norm: Vec<f64>,
    /// Norm of the Hilbert structure of the chosen form.
    pub hilbert_norm: Vec<f64>,
    /// Moments of the physical perturbation, averaged over `x`.
    pub moments: Vec<MomentReport>,
    /// `½ ‖f‖²` in the Hilbert structure of the linearization.
    pub entropy: Vec<f64>,
    pub entropy_monotone: bool,
    /// `min F` on the grid (mean mode for Galerkin runs).
    pub min_density: Vec<f64>,
    pub decay: Option<DecayFit>,
    pub final_state: SimState,
}

pub struct Simulator<'a> {
    problem: &'a Problem,
    config: SimConfig,
    rhs: Box<dyn BlockRhs + 'a>,
    transport: Option<Transport>,
    basis: Option<GpcBasis>,
    projector: InvariantProjector,
    m: SpeciesField,
    sqrt_m: Vec<f64>,
    brackets_k: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(problem: &'a Problem, config: SimConfig) -> Result<Self> {
        config.validate()?;
        let (rhs, basis): (Box<dyn BlockRhs + 'a>, Option<GpcBasis>) = match &config.unknown {
            Unknown::Deterministic { z } => (
                Box::new(Hierarchy::new(problem, *z, 0, config.form, config.nonlinear, config.conservative)?),
                None,
            ),
            Unknown::Sg { k, .. } => {
                let basis = build_basis(config.measure, *k)?;
                (
                    Box::new(SgRhs::new(problem, basis.clone(), config.form, config.nonlinear, config.conservative)?),
                    Some(basis),
                )
            }
            Unknown::Collocation { .. } => {
                return Err(Error::invalid("unknown", "collocation runs go through collocation_reference"));
            }
        };
        let transport = match config.mode {
            SpatialMode::Homogeneous => None,
            SpatialMode::Torus1d { nx, period } => Some(Transport::new(problem.grid(), nx, period)),
        };
        let m = problem.maxwellian();
        let k = config.k_weight;
        Ok(Self {
            problem,
            rhs,
            transport,
            basis,
            projector: InvariantProjector::new(problem.grid(), &problem.species, config.form)?,
            sqrt_m: m.as_slice().iter().map(|x| x.sqrt()).collect(),
            m,
            brackets_k: problem.grid().brackets().iter().map(|b| b.powf(k)).collect(),
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn basis(&self) -> Option<&GpcBasis> {
        self.basis.as_ref()
    }

    fn period(&self) -> f64 {
        match self.config.mode {
            SpatialMode::Homogeneous => 1.0,
            SpatialMode::Torus1d { period, .. } => period,
        }
    }

    fn velocity_data(&self, z: f64) -> SpeciesField {
        let f = self.config.init.velocity_profile(self.problem.grid(), self.problem.species.len(), z, 0);
        if self.config.init.microscopic {
            self.projector.complement(&f)
        } else {
            f
        }
    }

    /// `f_0` in the configured layout.
    pub fn initial_state(&self) -> Result<SimState> {
        let nx = self.config.nx();
        let (layout, cell): (Layout, Vec<f64>) = match (&self.config.unknown, &self.basis) {
            (Unknown::Deterministic { z }, _) => {
                let f = self.velocity_data(*z);
                (
                    Layout::Fields {
                        n_species: f.n_species(),
                        n_points: f.n_points(),
                    },
                    f.into_values(),
                )
            }
            (Unknown::Sg { .. }, Some(basis)) => {
                let nodes: Vec<SpeciesField> = basis.quadrature().nodes.iter().map(|z| self.velocity_data(*z)).collect();
                let g = GpcField::project(basis, &nodes)?;
                (
                    Layout::Gpc {
                        n_species: g.n_species(),
                        n_modes: g.n_modes(),
                        n_points: g.n_points(),
                    },
                    g.as_slice().to_vec(),
                )
            }
            _ => return Err(Error::invalid("unknown", "no basis for this unknown")),
        };
        let mut data = Vec::with_capacity(nx * cell.len());
        for c in 0..nx {
            let s = match self.config.mode {
                SpatialMode::Homogeneous => 1.0,
                SpatialMode::Torus1d { period, .. } => self.config.init.x_profile(c as f64 * period / nx as f64, period),
            };
            data.extend(cell.iter().map(|x| s * x));
        }
        let mut state = SimState {
            t: 0.0,
            nx,
            layout,
            data,
            initial_max: 0.0,
        };
        state.initial_max = state.max_abs();
        Ok(state)
    }

    /// One step: Strang splitting on the torus, a collision step otherwise.
    pub fn step(&self, state: &mut SimState) -> Result<()> {
        let dt = self.config.dt;
        let block = self.rhs.block();
        if state.data.len() != block * state.nx {
            return Err(Error::Mismatch("state does not match the simulator".into()));
        }
        if let Some(tr) = &self.transport {
            tr.apply(&mut state.data, block, 0.5 * dt);
        }
        let rhs = self.rhs.as_ref();
        let scheme = self.config.scheme;
        state
            .data
            .par_chunks_mut(block)
            .map(|cell| advance(rhs, scheme, dt, cell))
            .collect::<Result<Vec<()>>>()?;
        if let Some(tr) = &self.transport {
            tr.apply(&mut state.data, block, 0.5 * dt);
        }
        state.t += dt;
        let norm = state.max_abs();
        let limit = 1e6 * state.initial_max;
        if !norm.is_finite() || (state.initial_max > 0.0 && norm > limit) {
            return Err(Error::BlowUp { t: state.t, norm, limit });
        }
        Ok(())
    }

    pub fn run(&self) -> Result<RunReport> {
        self.run_from(self.initial_state()?)
    }

    pub fn run_from(&self, mut state: SimState) -> Result<RunReport> {
        let mut rec = Recorder::default();
        self.observe(&state, &mut rec)?;
        let n = self.config.n_steps();
        for s in 1..=n {
            self.step(&mut state)?;
            if s % self.config.output_stride == 0 || s == n {
                self.observe(&state, &mut rec)?;
            }
        }
        let entropy_monotone = rec.entropy.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
        let decay = fit_decay(&rec.times, &rec.micro).ok();
        Ok(RunReport {
            times: rec.times,
            micro_norm: rec.micro,
            hydro_norm: rec.hydro,
            hilbert_norm: rec.hilbert,
            moments: rec.moments,
            entropy: rec.entropy,
            entropy_monotone,
            min_density: rec.min_density,
            decay,
            final_state: state,
        })
    }

    /// Per-cell mode fields of a state (one mode for fixed-`z` layouts), and
    /// the `ℓ²` weights used to combine mode norms.
    fn modes(&self, state: &SimState) -> Result<(Vec<Vec<SpeciesField>>, Vec<f64>)> {
        let mut cells = Vec::with_capacity(state.nx);
        for c in 0..state.nx {
            cells.push(match state.layout {
                Layout::Fields { .. } => vec![state.cell_field(c)?],
                Layout::Gpc { n_modes, .. } => {
                    let g = state.cell_gpc(c)?;
                    (0..n_modes).map(|k| g.mode(k)).collect()
                }
            });
        }
        let q = match self.config.unknown {
            Unknown::Sg { q, .. } => q,
            _ => 0,
        };
        let kw = (0..cells[0].len()).map(|k| ((k + 1) as f64).powi(2 * q as i32)).collect();
        Ok((cells, kw))
    }

    fn l1k(&self, f: &SpeciesField) -> f64 {
        let w = self.problem.grid().weight();
        (0..f.n_species())
            .map(|i| f.species(i).iter().zip(&self.brackets_k).map(|(x, b)| x.abs() * b).sum::<f64>())
            .sum::<f64>()
            * w
    }

    fn plain(&self, f: &SpeciesField) -> SpeciesField {
        match self.config.form {
            PerturbationForm::Additive => f.clone(),
            PerturbationForm::SqrtWeighted => {
                let mut out = f.clone();
                for (x, s) in out.as_mut_slice().iter_mut().zip(&self.sqrt_m) {
                    *x *= s;
                }
                out
            }
        }
    }

    fn hilbert_sq(&self, f: &SpeciesField) -> Result<f64> {
        let grid = self.problem.grid();
        let n = match self.config.form {
            PerturbationForm::Additive => weighted_norm(grid, f, 0.0, NormKind::L2InvMaxwellian { maxwellian: &self.m })?,
            PerturbationForm::SqrtWeighted => weighted_norm(grid, f, 0.0, NormKind::L2)?,
        };
        Ok(n * n)
    }

    fn observe(&self, state: &SimState, rec: &mut Recorder) -> Result<()> {
        let (cells, kw) = self.modes(state)?;
        let nx = state.nx;
        let n_modes = kw.len();
        let dx = match self.config.mode {
            SpatialMode::Homogeneous => 1.0,
            SpatialMode::Torus1d { .. } => self.period() / nx as f64,
        };
        // x-average of each mode and its hydrodynamic projection
        let mut hydro = Vec::with_capacity(n_modes);
        for k in 0..n_modes {
            let mut avg = SpeciesField::zeros(self.m.n_species(), self.m.n_points());
            for cell in &cells {
                avg.axpy(1.0 / nx as f64, &cell[k]);
            }
            hydro.push(self.projector.project(&avg));
        }
        let mut micro = 0.0f64;
        let mut hilbert = 0.0;
        for cell in &cells {
            let mut acc = 0.0;
            for k in 0..n_modes {
                let d = cell[k].sub(&hydro[k]);
                acc += kw[k] * self.l1k(&d).powi(2);
                hilbert += dx * self.hilbert_sq(&cell[k])?;
            }
            micro = micro.max(acc.sqrt());
        }
        let hydro_norm = (0..n_modes).map(|k| kw[k] * self.l1k(&hydro[k]).powi(2)).sum::<f64>().sqrt();
        let mut mean0 = SpeciesField::zeros(self.m.n_species(), self.m.n_points());
        let mut min_density = f64::INFINITY;
        for cell in &cells {
            let p = self.plain(&cell[0]);
            mean0.axpy(1.0 / nx as f64, &p);
            for (x, m) in p.as_slice().iter().zip(self.m.as_slice()) {
                min_density = min_density.min(m + x);
            }
        }
        rec.times.push(state.t);
        rec.micro.push(micro);
        rec.hydro.push(hydro_norm);
        rec.hilbert.push(hilbert.sqrt());
        rec.entropy.push(0.5 * hilbert);
        rec.moments.push(moments(self.problem.grid(), &mean0));
        rec.min_density.push(min_density);
        Ok(())
    }
}

#[derive(Default)]
struct Recorder {
    times: Vec<f64>,
    micro: Vec<f64>,
    hydro: Vec<f64>,
    hilbert: Vec<f64>,
    moments: Vec<MomentReport>,
    entropy: Vec<f64>,
    min_density: Vec<f64>,
}

pub fn run(problem: &Problem, config: SimConfig) -> Result<RunReport> {
    Simulator::new(problem, config)?.run()
}

/// Deterministic runs at every node, in parallel over nodes.
pub fn collocation_reference(problem: &Problem, config: &SimConfig, nodes: &[f64]) -> Result<Vec<RunReport>> {
    if nodes.is_empty() {
        return Err(Error::invalid("nodes", "collocation needs at least one node"));
    }
    nodes
        .par_iter()
        .map(|z| {
            let mut c = config.clone();
            c.unknown = Unknown::Deterministic { z: *z };
            run(problem, c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{AngularCoeffs, AngularKind};
    use crate::linop::{assemble_l_sqrt_m, spectral_analysis};

    fn problem(n: usize) -> Problem {
        let grid = VelocityGrid::new(2, n, 4.0, 8).unwrap();
        let model = KernelModel::uniform(0.0, 2, 1.0, AngularKind::LinearInZ, AngularCoeffs::constant(0.1), AngularCoeffs::constant(0.01)).unwrap();
        Problem::new(&grid, SpeciesSet::new(vec![1.0, 0.6]).unwrap(), model).unwrap()
    }

    #[test]
    fn zero_data_stays_zero() {
        let p = problem(6);
        let mut cfg = SimConfig {
            nonlinear: true,
            t_end: 1.0,
            ..SimConfig::default()
        };
        cfg.init.amplitude = 0.0;
        let rep = run(&p, cfg).unwrap();
        assert!(rep.final_state.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn nonlinear_run_conserves_moments() {
        let p = problem(6);
        let mut cfg = SimConfig {
            nonlinear: true,
            t_end: 2.0,
            dt: 0.1,
            output_stride: 1,
            ..SimConfig::default()
        };
        cfg.init.microscopic = false;
        cfg.init.amplitude = 0.01;
        let rep = run(&p, cfg).unwrap();
        let m0 = rep.moments[0].flatten();
        for m in &rep.moments {
            for (a, b) in m.flatten().iter().zip(&m0) {
                assert!((a - b).abs() < 1e-14, "{a} {b}");
            }
        }
        assert!(rep.min_density.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn linearized_entropy_decreases_at_gap_rate() {
        let p = problem(8);
        let cfg = SimConfig {
            form: PerturbationForm::SqrtWeighted,
            t_end: 40.0,
            dt: 0.1,
            ..SimConfig::default()
        };
        let rep = run(&p, cfg).unwrap();
        assert!(rep.entropy_monotone);
        let gap = spectral_analysis(&assemble_l_sqrt_m(&p.ws, &p.model, &p.species, 0.0).unwrap()).unwrap().gap;
        let fit = rep.decay.unwrap();
        assert!((fit.lambda_hat - gap).abs() < 0.1 * gap, "{} {}", fit.lambda_hat, gap);
    }

    #[test]
    fn single_mode_galerkin_matches_mean_kernel() {
        let p = problem(6);
        let mut cfg = SimConfig {
            t_end: 1.0,
            dt: 0.1,
            measure: Measure::Beta {
                alpha: 1.0,
                beta: 2.0,
                c_z: 1.0,
            },
            ..SimConfig::default()
        };
        cfg.init.z_rate = 0.0;
        let mean = build_basis(cfg.measure, 1).unwrap().mean();
        let det = run(
            &p,
            SimConfig {
                unknown: Unknown::Deterministic { z: mean },
                ..cfg.clone()
            },
        )
        .unwrap();
        let sg = run(
            &p,
            SimConfig {
                unknown: Unknown::Sg { k: 1, q: 0 },
                ..cfg
            },
        )
        .unwrap();
        let d = det
            .final_state
            .data
            .iter()
            .zip(&sg.final_state.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-10 * det.final_state.max_abs(), "{d}");
    }

    #[test]
    fn free_transport_is_exact() {
        let grid = VelocityGrid::new(2, 4, 2.0, 4).unwrap();
        let model = KernelModel::uniform(0.0, 2, 1.0, AngularKind::LinearInZ, AngularCoeffs::ZERO, AngularCoeffs::ZERO).unwrap();
        let p = Problem::new(&grid, SpeciesSet::new(vec![1.0, 1.0]).unwrap(), model).unwrap();
        let period = 2.0;
        let mut cfg = SimConfig {
            mode: SpatialMode::Torus1d { nx: 16, period },
            t_end: 0.7,
            dt: 0.1,
            conservative: false,
            ..SimConfig::default()
        };
        cfg.init.x_offset = 0.0;
        cfg.init.microscopic = false;
        let sim = Simulator::new(&p, cfg.clone()).unwrap();
        let s0 = sim.initial_state().unwrap();
        let rep = sim.run().unwrap();
        let g = cfg.init.velocity_profile(&grid, 2, 0.0, 0);
        let t = rep.final_state.t;
        for c in 0..16 {
            let x = c as f64 * period / 16.0;
            let f = rep.final_state.cell_field(c).unwrap();
            for i in 0..2 {
                for (pt, v) in grid.points().iter().enumerate() {
                    let exact = cfg.init.x_profile(x - v[0] * t, period) * g.get(i, pt);
                    assert!((f.get(i, pt) - exact).abs() < 1e-13, "{} {}", f.get(i, pt), exact);
                }
            }
        }
        assert_eq!(s0.nx, 16);
    }

    #[test]
    fn rejects_bad_configs() {
        let p = problem(4);
        for cfg in [
            SimConfig {
                dt: 0.0,
                ..SimConfig::default()
            },
            SimConfig {
                t_end: 0.01,
                ..SimConfig::default()
            },
            SimConfig {
                mode: SpatialMode::Torus1d { nx: 4, period: 1.0 },
                ..SimConfig::default()
            },
            SimConfig {
                unknown: Unknown::Sg { k: 0, q: 0 },
                ..SimConfig::default()
            },
            SimConfig {
                unknown: Unknown::Collocation { nodes: vec![0.0] },
                ..SimConfig::default()
            },
        ] {
            assert!(Simulator::new(&p, cfg).is_err());
        }
    }

    #[test]
    fn single_node_collocation_is_the_deterministic_run() {
        let p = problem(4);
        let cfg = SimConfig {
            t_end: 0.5,
            unknown: Unknown::Deterministic { z: 0.3 },
            ..SimConfig::default()
        };
        let a = run(&p, cfg.clone()).unwrap();
        let b = collocation_reference(&p, &cfg, &[0.3]).unwrap();
        assert_eq!(a, b[0]);
    }
}
