//! Independent re-derivations of the optimized paths: a brute-force collision
//! sum, a cyclic Jacobi eigensolver, Newton-based Gauss-Legendre quadrature
//! of the Galerkin tensor, z-finite differences of collocation runs, and
//! Leibniz sums by enumeration of derivative placements.

use std::collections::BTreeMap;

use kmsuq_core::collision::{q_pair_with, CollisionWorkspace, KernelTable};
use kmsuq_core::gpc::{assemble_s_tensor, build_basis, Measure};
use kmsuq_core::grid::{sphere_area, PerturbationForm, SpeciesField, SpeciesSet, VelocityGrid};
use kmsuq_core::kernel::{AngularCoeffs, AngularKind, KernelModel};
use kmsuq_core::linop::{assemble_l_sqrt_m, spectral_analysis, AssembledOperator};
use kmsuq_core::sensitivity::{evolve_sensitivities, leibniz_q_with, SensitivityOptions, SensitivityState};
use kmsuq_core::solver::{run, PerturbationSpec, Problem, SimConfig, Unknown};
use kmsuq_core::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gain and loss parts of `Q_ij(f_i, g_j)` by enumeration of every
/// lattice pair `(v', v'*)` sharing the center and the relative speed of
/// `(v, v*)`.
pub fn brute_force_q_pair(
    grid: &VelocityGrid,
    model: &KernelModel,
    i: usize,
    j: usize,
    f_i: &[f64],
    g_j: &[f64],
    z: f64,
    order: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let np = grid.len();
    let lat = grid.lattice();
    let pts = grid.points();
    let w0 = grid.weight() * sphere_area(grid.dim());
    let mut gain = vec![0.0; np];
    let mut loss = vec![0.0; np];
    let mut post = Vec::new();
    for p in 0..np {
        for q in 0..np {
            let rel: Vec<f64> = (0..3).map(|a| pts[p][a] - pts[q][a]).collect();
            let s2: f64 = rel.iter().map(|x| x * x).sum();
            let speed = s2.sqrt();
            if p == q {
                let b = model.eval_phi(i, j, 0.0) * model.eval_b(i, j, 0.0, z, order)?;
                gain[p] += w0 * b * f_i[p] * g_j[p];
                loss[p] += w0 * b * f_i[p] * g_j[p];
                continue;
            }
            let u2: i64 = (0..3).map(|a| ((lat[p][a] - lat[q][a]) as i64).pow(2)).sum();
            post.clear();
            for pp in 0..np {
                let mq = [
                    lat[p][0] + lat[q][0] - lat[pp][0],
                    lat[p][1] + lat[q][1] - lat[pp][1],
                    lat[p][2] + lat[q][2] - lat[pp][2],
                ];
                let Some(qq) = grid.index_of(&mq) else { continue };
                let d2: i64 = (0..3).map(|a| ((lat[pp][a] - mq[a]) as i64).pow(2)).sum();
                if d2 == u2 {
                    post.push((pp, qq));
                }
            }
            let w = w0 / post.len() as f64;
            let phi = model.eval_phi(i, j, speed);
            for &(pp, qq) in &post {
                let relp: Vec<f64> = (0..3).map(|a| pts[pp][a] - pts[qq][a]).collect();
                let cos = (rel.iter().zip(&relp).map(|(x, y)| x * y).sum::<f64>() / s2).clamp(-1.0, 1.0);
                let bw = w * phi * model.eval_b(i, j, cos, z, order)?;
                gain[p] += bw * f_i[pp] * g_j[qq];
                loss[p] += bw * f_i[p] * g_j[q];
            }
        }
    }
    Ok((gain, loss))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    let scale = a.norm().max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |c| *c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[(r, c)].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|k| a[(k, k)]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss-Legendre rule on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre_newton(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut r = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, r);
            let dr = p / dp;
            r -= dr;
            if dr.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, r);
        x[i] = r;
        w[i] = 2.0 / ((1.0 - r * r) * dp * dp);
    }
    (x, w)
}

/// `∫ b_il(cos θ, z) ψ_k(z) ψ_j(z) dz / 2c_z` for the uniform law, with
/// `ψ_k = √(2k+1) P_k(z / c_z)`.
pub fn s_tensor_oracle(model: &KernelModel, i: usize, l: usize, cos_theta: f64, c_z: f64, k: usize) -> Result<DMatrix<f64>> {
    let (x, w) = gauss_legendre_newton(2 * k + 4);
    let mut out = DMatrix::zeros(k, k);
    for (xs, ws) in x.iter().zip(&w) {
        let b = model.eval_b(i, l, cos_theta, c_z * xs, 0)?;
        let psi: Vec<f64> = (0..k).map(|m| ((2 * m + 1) as f64).sqrt() * legendre(m, *xs).0).collect();
        for r in 0..k {
            for c in 0..k {
                out[(r, c)] += 0.5 * ws * b * psi[r] * psi[c];
            }
        }
    }
    Ok(out)
}

/// `∂^n` of `Q^{b(z)}(f(z), f(z))` by summing over all `3^n` ways of
/// assigning each derivative to the kernel or to one of the two arguments.
pub fn leibniz_by_enumeration(ws: &CollisionWorkspace, tables: &[Option<KernelTable>], derivs: &[SpeciesField], n: usize) -> Result<SpeciesField> {
    let mut counts: BTreeMap<(usize, usize, usize), u64> = BTreeMap::new();
    for word in 0..3usize.pow(n as u32) {
        let mut c = [0usize; 3];
        let mut w = word;
        for _ in 0..n {
            c[w % 3] += 1;
            w /= 3;
        }
        *counts.entry((c[0], c[1], c[2])).or_default() += 1;
    }
    let (ns, np) = (derivs[0].n_species(), derivs[0].n_points());
    let mut out = SpeciesField::zeros(ns, np);
    for ((kk, a, b), count) in counts {
        let Some(t) = &tables[kk] else { continue };
        for i in 0..ns {
            let mut acc = vec![0.0; np];
            for j in 0..ns {
                let q = q_pair_with(ws, t, i, j, derivs[a].species(i), derivs[b].species(j))?;
                acc.iter_mut().zip(&q).for_each(|(x, y)| *x += y);
            }
            out.species_mut(i).iter_mut().zip(&acc).for_each(|(x, y)| *x += count as f64 * y);
        }
    }
    Ok(out)
}

/// One comparison of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    /// Relative (or absolute, as named) discrepancy.
    pub error: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn pass(&self) -> bool {
        self.error <= self.tolerance
    }

    /// `tolerance / error`; infinite for an exact match.
    pub fn margin(&self) -> f64 {
        if self.error == 0.0 {
            f64::INFINITY
        } else {
            self.tolerance / self.error
        }
    }
}

fn check(name: impl Into<String>, error: f64, tolerance: f64) -> OracleCheck {
    OracleCheck {
        name: name.into(),
        error,
        tolerance,
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn random_field(rng: &mut ChaCha8Rng, ns: usize, np: usize) -> SpeciesField {
    SpeciesField::from_values(ns, np, (0..ns * np).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// Largest `|q_pair - (gain - loss)|` relative to `max(|gain|, |loss|)` over
/// species pairs and kernel orders, on random fields.
pub fn collision_discrepancy(problem: &Problem, z: f64, orders: &[usize], seed: u64) -> Result<f64> {
    let grid = problem.grid();
    let ns = problem.species.len();
    let np = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &order in orders {
        let table = KernelTable::at(&problem.ws, &problem.model, z, order)?;
        for i in 0..ns {
            for j in 0..ns {
                let f = random_field(&mut rng, 1, np);
                let g = random_field(&mut rng, 1, np);
                let fast = q_pair_with(&problem.ws, &table, i, j, f.as_slice(), g.as_slice())?;
                let (gain, loss) = brute_force_q_pair(grid, &problem.model, i, j, f.as_slice(), g.as_slice(), z, order)?;
                let scale = max_abs(&gain).max(max_abs(&loss)).max(f64::MIN_POSITIVE);
                let d: Vec<f64> = fast.iter().zip(gain.iter().zip(&loss)).map(|(a, (g, l))| a - (g - l)).collect();
                worst = worst.max(max_abs(&d) / scale);
            }
        }
    }
    Ok(worst)
}

/// The fixed tiny configuration of the suite.
pub fn tiny_problem(n_per_axis: usize) -> Result<Problem> {
    let grid = VelocityGrid::new(2, n_per_axis, 4.0, 8)?;
    let model = KernelModel::uniform(
        0.5,
        2,
        1.0,
        AngularKind::LinearInZ,
        AngularCoeffs { a: 0.05, c: 0.1 },
        AngularCoeffs { a: 0.01, c: 0.02 },
    )?;
    Problem::new(&grid, SpeciesSet::new(vec![1.0, 0.7])?, model)
}

fn operator_l2(op: &AssembledOperator) -> DMatrix<f64> {
    op.l2_form()
}

/// Every oracle comparison on the tiny configuration.
pub fn oracle_suite() -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    let p = tiny_problem(6)?;
    let z = 0.3;

    out.push(check(
        "collision: q_pair vs brute force, orders 0 and 1 (relative)",
        collision_discrepancy(&p, z, &[0, 1], 1)?,
        1e-12,
    ));

    let l = assemble_l_sqrt_m(&p.ws, &p.model, &p.species, z)?;
    let spec = spectral_analysis(&l)?;
    let ev = jacobi_eigenvalues(&operator_l2(&l));
    let scale = ev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-8 * scale;
    let zero = ev.iter().filter(|x| x.abs() <= tol).count();
    let gap = ev.iter().find(|x| **x < -tol).map_or(0.0, |x| -x);
    out.push(check(
        "eigensolve: Jacobi gap vs spectral_analysis (relative)",
        (gap - spec.gap).abs() / spec.gap,
        1e-9,
    ));
    let expected = p.species.len() + p.grid().dim() + 1;
    out.push(check(
        format!("eigensolve: Jacobi zero multiplicity {zero} vs {expected} (count difference)"),
        zero.abs_diff(expected) as f64 + zero.abs_diff(spec.zero_multiplicity) as f64,
        0.0,
    ));

    let c_z = 0.8;
    let basis = build_basis(Measure::Uniform { c_z }, 4)?;
    let s = assemble_s_tensor(&basis, &p.model);
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for l in 0..2 {
            for cos in [-0.9, -0.3, 0.0, 0.4, 0.95] {
                let o = s_tensor_oracle(&p.model, i, l, cos, c_z, 4)?;
                for k in 0..4 {
                    for j in 0..4 {
                        worst = worst.max((o[(k, j)] - s.entry(&p.model, i, l, k, j, cos)).abs());
                    }
                }
            }
        }
    }
    out.push(check("S tensor: Gauss-Legendre quadrature vs closed form (absolute)", worst, 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let smooth = {
        let grid = p.grid().clone();
        let model = KernelModel::uniform(
            0.5,
            2,
            1.0,
            AngularKind::GeneralSmooth {
                profile: kmsuq_core::kernel::ZProfile::Exp { rate: 0.7 },
                max_order: 6,
            },
            AngularCoeffs { a: 0.05, c: 0.1 },
            AngularCoeffs { a: 0.01, c: 0.02 },
        )?;
        Problem::new(&grid, p.species.clone(), model)?
    };
    for (label, prob) in [("linear", &p), ("smooth", &smooth)] {
        let mut worst: f64 = 0.0;
        for n in 1..=3 {
            let derivs: Vec<SpeciesField> = (0..=n).map(|_| random_field(&mut rng, 2, prob.grid().len())).collect();
            let tables: Vec<Option<KernelTable>> = (0..=n)
                .map(|k| KernelTable::at(&prob.ws, &prob.model, z, k).map(|t| (!t.is_zero()).then_some(t)))
                .collect::<Result<_>>()?;
            let a = leibniz_q_with(&prob.ws, &tables, &derivs, n)?;
            let b = leibniz_by_enumeration(&prob.ws, &tables, &derivs, n)?;
            worst = worst.max(a.sub(&b).max_abs() / b.max_abs());
        }
        out.push(check(
            format!("Leibniz: binomial sum vs enumeration, {label} kernel, n=1..3 (relative)"),
            worst,
            1e-12,
        ));
    }

    // r = 1 sensitivity against a centered difference of two collocation runs
    let cfg = SimConfig {
        nonlinear: true,
        dt: 0.1,
        t_end: 2.0,
        output_stride: 20,
        init: PerturbationSpec {
            amplitude: 0.05,
            ..PerturbationSpec::default()
        },
        ..SimConfig::default()
    };
    let delta = 1e-3;
    let at = |zz: f64| -> Result<SpeciesField> {
        let mut c = cfg.clone();
        c.unknown = Unknown::Deterministic { z: zz };
        let r = run(&p, c)?;
        r.final_state.cell_field(0)
    };
    let mut fd = at(z + delta)?.sub(&at(z - delta)?);
    fd.scale(0.5 / delta);
    let (s0, _) = SensitivityState::initial(&p, &cfg.init, z, 1, PerturbationForm::Additive)?;
    let sens = evolve_sensitivities(
        &p,
        &s0,
        &SensitivityOptions {
            dt: cfg.dt,
            t_end: cfg.t_end,
            ..SensitivityOptions::default()
        },
    )?;
    let d1 = &sens.states.last().expect("recorded").derivs[1];
    out.push(check(
        "sensitivity: r=1 vs collocation central difference (relative)",
        d1.sub(&fd).max_abs() / d1.max_abs(),
        1e-5,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_known_spectrum() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let ev = jacobi_eigenvalues(&m);
        let s = 2f64.sqrt();
        for (a, b) in ev.iter().zip([2.0 + s, 2.0, 2.0 - s]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn newton_gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre_newton(5);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((i - 2.0 / 9.0).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-15);
    }
}
