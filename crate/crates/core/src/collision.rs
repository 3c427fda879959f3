//! Discrete bilinear collision operators on the velocity lattice.
//!
//! For a pair of lattice points `(v_p, v_q)` write `u = m_p - m_q` and
//! `c = m_p + m_q` in lattice coordinates. The post-collision pairs are all
//! `(p', q')` with `m_p' = (c + u')/2`, `m_q' = (c - u')/2` inside the box,
//! where `|u'|^2 = |u|^2` and `u' ≡ u (mod 2)` componentwise. They share the
//! center of mass and the relative speed of `(v_p, v_q)`, so mass, momentum
//! and energy are conserved exactly. The sphere measure is split evenly over
//! the admissible set, which depends only on `(c, |u|^2)`; the weights are
//! therefore invariant under `(v, v*) -> (v*, v)` and `(v, v*) -> (v', v'*)`.
//! The diagonal pair `p = q` is kept as a single trivial collision.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{sphere_area, InvariantProjector, PerturbationForm, SpeciesField, SpeciesSet, VelocityGrid};
use crate::kernel::{sin_cos, speed_factor, KernelMix, KernelModel};

/// One post-collision configuration reached from an output point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    /// Partner point `v*`.
    pub q: u32,
    /// `v'`
    pub pp: u32,
    /// `v'*`
    pub qq: u32,
    /// `cos θ = (v - v*)·(v' - v'*) / |v - v*|^2`, 0 on the diagonal.
    pub cos_theta: f64,
    /// `|v - v*|`
    pub speed: f64,
    /// `h^dim` times the sphere weight of this configuration.
    pub weight: f64,
}

/// Precomputed collision geometry of a grid, grouped by output point.
#[derive(Debug, Clone)]
pub struct CollisionWorkspace {
    grid: VelocityGrid,
    offsets: Vec<usize>,
    collisions: Vec<Collision>,
}

impl CollisionWorkspace {
    pub fn new(grid: &VelocityGrid) -> Self {
        let dim = grid.dim();
        let n = grid.n_per_axis() as i32;
        let h = grid.spacing();
        let wq = grid.weight();
        let area = sphere_area(dim);

        // every lattice difference vector, bucketed by (|u|^2, parity)
        let mut dirs: HashMap<(i32, u8), Vec<[i32; 3]>> = HashMap::new();
        let span = -(n - 1)..n;
        let zspan = if dim == 3 { -(n - 1)..n } else { 0..1 };
        for a in span.clone() {
            for b in span.clone() {
                for c in zspan.clone() {
                    let u = [a, b, c];
                    dirs.entry(dir_key(&u)).or_default().push(u);
                }
            }
        }

        let lattice = grid.lattice();
        let per_point: Vec<Vec<Collision>> = (0..grid.len())
            .into_par_iter()
            .map(|p| {
                let mp = lattice[p];
                let mut out = Vec::new();
                let mut admissible = Vec::new();
                for (q, mq) in lattice.iter().enumerate() {
                    if q == p {
                        out.push(Collision {
                            q: q as u32,
                            pp: p as u32,
                            qq: q as u32,
                            cos_theta: 0.0,
                            speed: 0.0,
                            weight: wq * area,
                        });
                        continue;
                    }
                    let mut u = [0i32; 3];
                    let mut c = [0i32; 3];
                    for a in 0..dim {
                        u[a] = mp[a] - mq[a];
                        c[a] = mp[a] + mq[a];
                    }
                    let n2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
                    admissible.clear();
                    for up in &dirs[&dir_key(&u)] {
                        let mut a_pt = [0i32; 3];
                        let mut b_pt = [0i32; 3];
                        for a in 0..dim {
                            a_pt[a] = (c[a] + up[a]) / 2;
                            b_pt[a] = (c[a] - up[a]) / 2;
                        }
                        if let (Some(pp), Some(qq)) = (grid.index_of(&a_pt), grid.index_of(&b_pt)) {
                            let dot = u[0] * up[0] + u[1] * up[1] + u[2] * up[2];
                            admissible.push((pp, qq, dot as f64 / n2 as f64));
                        }
                    }
                    // u' = u is always admissible
                    let w = wq * area / admissible.len() as f64;
                    let speed = h * (n2 as f64).sqrt();
                    for &(pp, qq, cos_theta) in &admissible {
                        out.push(Collision {
                            q: q as u32,
                            pp: pp as u32,
                            qq: qq as u32,
                            cos_theta,
                            speed,
                            weight: w,
                        });
                    }
                }
                out
            })
            .collect();

        let mut offsets = Vec::with_capacity(grid.len() + 1);
        offsets.push(0);
        let mut collisions = Vec::with_capacity(per_point.iter().map(Vec::len).sum());
        for list in per_point {
            collisions.extend(list);
            offsets.push(collisions.len());
        }
        Self {
            grid: grid.clone(),
            offsets,
            collisions,
        }
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.collisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collisions.is_empty()
    }

    /// All collisions whose output point is `p`.
    pub fn from_point(&self, p: usize) -> &[Collision] {
        &self.collisions[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Index range of [`Self::from_point`] in the flat collision list.
    pub fn range(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    pub fn collisions(&self) -> &[Collision] {
        &self.collisions
    }

    pub(crate) fn check_field(&self, f: &SpeciesField) -> Result<()> {
        if f.n_points() != self.grid.len() {
            return Err(Error::Mismatch(format!("field has {} points, grid has {}", f.n_points(), self.grid.len())));
        }
        Ok(())
    }
}

fn dir_key(u: &[i32; 3]) -> (i32, u8) {
    let n2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    let parity = (u[0].rem_euclid(2) | (u[1].rem_euclid(2) << 1) | (u[2].rem_euclid(2) << 2)) as u8;
    (n2, parity)
}

/// Per-collision kernel values `w_q w_σ Φ_ij ∂^ℓ b_ij` for every ordered
/// species pair, at one kernel mix.
#[derive(Debug, Clone)]
pub struct KernelTable {
    n_species: usize,
    values: Vec<f64>,
}

impl KernelTable {
    pub fn new(ws: &CollisionWorkspace, model: &KernelModel, mix: KernelMix) -> Self {
        let n = model.n_species();
        let nn = n * n;
        let pairs = model.pair_table(mix);
        let gamma = model.gamma();
        let mut values = vec![0.0; ws.len() * nn];
        if !mix.is_zero() {
            values.par_chunks_mut(nn).zip(ws.collisions.par_iter()).for_each(|(out, c)| {
                let s = sin_cos(c.cos_theta);
                let base = c.weight * speed_factor(c.speed, gamma);
                for (o, (a, b)) in out.iter_mut().zip(&pairs) {
                    *o = base * (a * s + b);
                }
            });
        }
        Self { n_species: n, values }
    }

    /// Table of `∂_z^order B` at `z`.
    pub fn at(ws: &CollisionWorkspace, model: &KernelModel, z: f64, order: usize) -> Result<Self> {
        Ok(Self::new(ws, model, model.mix(z, order)?))
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[c * self.n_species * self.n_species + i * self.n_species + j]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|x| *x == 0.0)
    }
}

fn check_pair(ws: &CollisionWorkspace, table: &KernelTable, f: &SpeciesField, g: &SpeciesField) -> Result<()> {
    ws.check_field(f)?;
    ws.check_field(g)?;
    if f.n_species() != table.n_species || g.n_species() != table.n_species {
        return Err(Error::Mismatch("field species count differs from the kernel".into()));
    }
    Ok(())
}

/// `Q_ij(f_i, g_j)` for one species pair from a prepared table.
pub fn q_pair_with(ws: &CollisionWorkspace, table: &KernelTable, i: usize, j: usize, f_i: &[f64], g_j: &[f64]) -> Result<Vec<f64>> {
    let np = ws.grid.len();
    if f_i.len() != np || g_j.len() != np {
        return Err(Error::Mismatch("slice length differs from the grid".into()));
    }
    if i >= table.n_species || j >= table.n_species {
        return Err(Error::Mismatch("species index out of range".into()));
    }
    Ok((0..np)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for c in ws.range(p) {
                let col = &ws.collisions[c];
                let k = table.get(c, i, j);
                acc += k * (f_i[col.pp as usize] * g_j[col.qq as usize] - f_i[p] * g_j[col.q as usize]);
            }
            acc
        })
        .collect())
}

/// `Q^{b^ℓ}_ij(f_i, g_j)` with the kernel differentiated `order` times in `z`.
#[allow(clippy::too_many_arguments)]
pub fn q_pair(ws: &CollisionWorkspace, model: &KernelModel, i: usize, j: usize, f_i: &[f64], g_j: &[f64], z: f64, order: usize) -> Result<Vec<f64>> {
    let table = KernelTable::at(ws, model, z, order)?;
    q_pair_with(ws, &table, i, j, f_i, g_j)
}

/// `out_i = Σ_j Q_ij(f_i, g_j)`
pub fn q_bilinear(ws: &CollisionWorkspace, table: &KernelTable, f: &SpeciesField, g: &SpeciesField) -> Result<SpeciesField> {
    check_pair(ws, table, f, g)?;
    let n = table.n_species;
    let np = ws.grid.len();
    let mut point_major = vec![0.0; n * np];
    point_major.par_chunks_mut(n).enumerate().for_each(|(p, out)| {
        for c in ws.range(p) {
            let col = &ws.collisions[c];
            let (q, pp, qq) = (col.q as usize, col.pp as usize, col.qq as usize);
            for (i, o) in out.iter_mut().enumerate() {
                let (fpp, fp) = (f.get(i, pp), f.get(i, p));
                let mut acc = 0.0;
                for j in 0..n {
                    acc += table.get(c, i, j) * (fpp * g.get(j, qq) - fp * g.get(j, q));
                }
                *o += acc;
            }
        }
    });
    Ok(transpose(point_major, n, np))
}

/// `Q_i(F) = Σ_j Q_ij(F_i, F_j)` at `z`.
pub fn q_total(ws: &CollisionWorkspace, model: &KernelModel, f: &SpeciesField, z: f64) -> Result<SpeciesField> {
    let table = KernelTable::at(ws, model, z, 0)?;
    q_bilinear(ws, &table, f, f)
}

/// `Q̃_i(f, g) = ½ Σ_j (Q_ij(f_i, g_j) + Q_ij(g_i, f_j))`
pub fn q_tilde(ws: &CollisionWorkspace, table: &KernelTable, f: &SpeciesField, g: &SpeciesField) -> Result<SpeciesField> {
    let mut out = q_bilinear(ws, table, f, g)?;
    out.axpy(1.0, &q_bilinear(ws, table, g, f)?);
    out.scale(0.5);
    Ok(out)
}

fn transpose(point_major: Vec<f64>, n: usize, np: usize) -> SpeciesField {
    let mut out = SpeciesField::zeros(n, np);
    for p in 0..np {
        for i in 0..n {
            out.set(i, p, point_major[p * n + i]);
        }
    }
    out
}

/// Which equilibrium enters the loss integral of `ν_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NuConvention {
    /// `ν_ij = ∫ B_ij M_j(v*)`, the loss coefficient of the linearization.
    #[default]
    Standard,
    /// `ν_ij = ∫ B_ij M_i(v*)`
    OwnSpecies,
}

/// `ν_i(v) = Σ_j ∫ ∂^ℓ B_ij M_x(v*) dσ dv*` from a prepared table.
pub fn collision_frequency_with(ws: &CollisionWorkspace, table: &KernelTable, maxwellian: &SpeciesField, convention: NuConvention) -> Result<SpeciesField> {
    ws.check_field(maxwellian)?;
    let n = table.n_species;
    let np = ws.grid.len();
    let mut point_major = vec![0.0; n * np];
    point_major.par_chunks_mut(n).enumerate().for_each(|(p, out)| {
        for c in ws.range(p) {
            let q = ws.collisions[c].q as usize;
            for (i, o) in out.iter_mut().enumerate() {
                for j in 0..n {
                    let m = match convention {
                        NuConvention::Standard => maxwellian.get(j, q),
                        NuConvention::OwnSpecies => maxwellian.get(i, q),
                    };
                    *o += table.get(c, i, j) * m;
                }
            }
        }
    });
    Ok(transpose(point_major, n, np).with_label("collision_frequency"))
}

/// Collision frequency of the kernel differentiated `order` times at `z`.
pub fn collision_frequency(
    ws: &CollisionWorkspace,
    model: &KernelModel,
    species: &SpeciesSet,
    z: f64,
    order: usize,
    convention: NuConvention,
) -> Result<SpeciesField> {
    model.check_species(species)?;
    let m = crate::grid::maxwellian(&ws.grid, species);
    let table = KernelTable::at(ws, model, z, order)?;
    collision_frequency_with(ws, &table, &m, convention)
}

/// Removes the component of `q` along the collision invariants, projected in
/// `L^2(M^{-1/2})`. The result has zero mass per species, zero momentum and
/// zero energy.
pub fn conservative_correction(projector: &InvariantProjector, q: &SpeciesField) -> SpeciesField {
    projector.complement(q)
}

/// Builds the additive-form projector used by [`conservative_correction`].
pub fn correction_projector(grid: &VelocityGrid, species: &SpeciesSet) -> Result<InvariantProjector> {
    InvariantProjector::new(grid, species, PerturbationForm::Additive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{maxwellian, moments, norm2};
    use crate::kernel::{AngularCoeffs, AngularKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, gamma: f64) -> (CollisionWorkspace, KernelModel, SpeciesSet) {
        let grid = VelocityGrid::new(2, n, 4.0, 8).unwrap();
        let ws = CollisionWorkspace::new(&grid);
        let model = KernelModel::uniform(
            gamma,
            2,
            1.0,
            AngularKind::LinearInZ,
            AngularCoeffs { a: 0.3, c: 0.5 },
            AngularCoeffs { a: 0.1, c: 0.05 },
        )
        .unwrap();
        (ws, model, SpeciesSet::new(vec![1.0, 0.7]).unwrap())
    }

    fn random_field(grid: &VelocityGrid, n: usize, seed: u64) -> SpeciesField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpeciesField::from_fn(grid, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn geometry_conserves_momentum_and_energy() {
        let (ws, _, _) = setup(8, 0.0);
        let g = ws.grid();
        for p in 0..g.len() {
            let mut total = 0.0;
            for c in ws.from_point(p) {
                let (v, vs, vp, vps) = (g.point(p), g.point(c.q as usize), g.point(c.pp as usize), g.point(c.qq as usize));
                for a in 0..2 {
                    assert!((v[a] + vs[a] - vp[a] - vps[a]).abs() < 1e-13);
                }
                let e0 = norm2(v) + norm2(vs);
                assert!((e0 - norm2(vp) - norm2(vps)).abs() <= 1e-12 * e0.max(1.0));
                if c.q as usize == 7 {
                    total += c.weight;
                }
            }
            // sphere weights over the admissible set of one partner sum to |S|
            assert!((total - g.weight() * 2.0 * std::f64::consts::PI).abs() < 1e-12);
        }
    }

    #[test]
    fn maxwellian_is_annihilated() {
        let (ws, model, species) = setup(10, 0.5);
        let m = maxwellian(ws.grid(), &species);
        let q = q_total(&ws, &model, &m, 0.3).unwrap();
        assert!(q.max_abs() < 1e-16, "{}", q.max_abs());
    }

    #[test]
    fn collisions_conserve_invariants_exactly() {
        let (ws, model, _) = setup(8, 1.0);
        let f = random_field(ws.grid(), 2, 3);
        let q = q_total(&ws, &model, &f, -0.2).unwrap();
        let mom = moments(ws.grid(), &q);
        let abs = SpeciesField::from_fn(ws.grid(), 2, |_, _| 0.0).add(&q);
        let scale: f64 = ws
            .grid()
            .points()
            .iter()
            .enumerate()
            .map(|(p, v)| (abs.get(0, p).abs() + abs.get(1, p).abs()) * (1.0 + norm2(v)))
            .sum::<f64>()
            * ws.grid().weight();
        for x in mom.flatten() {
            assert!(x.abs() < 1e-14 * scale, "{x} vs {scale}");
        }
    }

    #[test]
    fn second_derivative_kernel_vanishes_for_linear_kernels() {
        let (ws, model, _) = setup(6, 0.0);
        let f = random_field(ws.grid(), 2, 1);
        let out = q_pair(&ws, &model, 0, 1, f.species(0), f.species(1), 0.4, 2).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn empty_species_gives_zero_operator() {
        let (ws, model, _) = setup(6, 0.0);
        let mut f = random_field(ws.grid(), 2, 5);
        f.species_mut(1).iter_mut().for_each(|x| *x = 0.0);
        let q = q_total(&ws, &model, &f, 0.0).unwrap();
        assert!(q.species(1).iter().all(|x| *x == 0.0));
        let q11 = q_pair(&ws, &model, 0, 0, f.species(0), f.species(0), 0.0, 0).unwrap();
        for (a, b) in q.species(0).iter().zip(&q11) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn maxwell_molecule_frequency_is_constant() {
        let grid = VelocityGrid::new(2, 10, 5.0, 8).unwrap();
        let ws = CollisionWorkspace::new(&grid);
        let b0 = 0.4;
        let model = KernelModel::uniform(0.0, 2, 1.3, AngularKind::LinearInZ, AngularCoeffs::constant(b0), AngularCoeffs::ZERO).unwrap();
        let species = SpeciesSet::new(vec![1.0, 1.0]).unwrap();
        let nu = collision_frequency(&ws, &model, &species, 0.0, 0, NuConvention::Standard).unwrap();
        let mass = moments(&grid, &maxwellian(&grid, &species)).mass_per_species[0];
        let expect = 2.0 * 1.3 * b0 * 2.0 * std::f64::consts::PI * mass;
        for x in nu.as_slice() {
            assert!((x - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn q_tilde_is_symmetric_and_collapses() {
        let (ws, model, _) = setup(6, 0.5);
        let table = KernelTable::at(&ws, &model, 0.1, 0).unwrap();
        let f = random_field(ws.grid(), 2, 11);
        let g = random_field(ws.grid(), 2, 12);
        let a = q_tilde(&ws, &table, &f, &g).unwrap();
        let b = q_tilde(&ws, &table, &g, &f).unwrap();
        assert!(a.sub(&b).max_abs() == 0.0);
        let d = q_tilde(&ws, &table, &f, &f).unwrap();
        let e = q_bilinear(&ws, &table, &f, &f).unwrap();
        assert!(d.sub(&e).max_abs() <= 1e-14 * e.max_abs());
    }

    #[test]
    fn correction_zeroes_moments() {
        let (ws, model, species) = setup(8, 0.0);
        let pi = correction_projector(ws.grid(), &species).unwrap();
        let f = random_field(ws.grid(), 2, 9);
        let mut q = q_total(&ws, &model, &f, 0.0).unwrap();
        q.axpy(1e-3, &f);
        let c = conservative_correction(&pi, &q);
        let scale = q.max_abs();
        for x in moments(ws.grid(), &c).flatten() {
            assert!(x.abs() < 1e-13 * scale.max(1.0), "{x}");
        }
        let twice = conservative_correction(&pi, &c);
        assert!(twice.sub(&c).max_abs() < 1e-13 * scale);
    }
}
