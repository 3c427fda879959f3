//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines always print.
//! `ACCEPTANCE_ONLY=3,11` restricts the run to the listed criteria.

use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use kmsuq::config::{parse_file, ProfileConfig, RunConfig};
use kmsuq::oracle::{brute_force_q_pair, s_tensor_oracle, tiny_problem};
use kmsuq::scenario::{build_problem, gpc_convergence, probe_term_i, random_gpc_field};
use kmsuq_core::collision::{collision_frequency, q_pair_with, q_total, KernelTable, NuConvention};
use kmsuq_core::gpc::{assemble_s_tensor, build_basis, Measure, SgOperator, TermIContext};
use kmsuq_core::grid::{moments, weighted_norm, NormKind, PerturbationForm, SpeciesField};
use kmsuq_core::kernel::{AngularCoeffs, AngularKind, KernelModel, ZProfile};
use kmsuq_core::linop::{assemble_l_plain, assemble_l_sqrt_m, assemble_linearized, estimate_operator_constants, spectral_analysis, split_ab, TruncationParams};
use kmsuq_core::sensitivity::{check_q_eqn_identity, decompose_g1_g2, duhamel_picard, evolve_sensitivities, SensitivityOptions, SensitivityState};
use kmsuq_core::solver::{run, PerturbationSpec, Problem, SimConfig, Simulator, Unknown};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Res<T> = Result<T, Box<dyn Error>>;

/// Criteria that fail on this discretization; each one is explained in the
/// README. The suite still runs them and fails if one starts passing, so the
/// list cannot go stale.
const KNOWN_FAILURES: &[u32] = &[12];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn reference() -> Res<RunConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    Ok(parse_file(&path)?)
}

fn random_field(rng: &mut ChaCha8Rng, ns: usize, np: usize) -> SpeciesField {
    SpeciesField::from_values(ns, np, (0..ns * np).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn sens_options(cfg: &RunConfig) -> SensitivityOptions {
    SensitivityOptions {
        dt: cfg.sim.dt,
        t_end: cfg.sim.t_end,
        scheme: cfg.sim.scheme,
        form: cfg.sim.form,
        nonlinear: cfg.sim.nonlinear,
        conservative: cfg.sim.conservative,
        k_weight: cfg.sim.k_weight,
        output_stride: cfg.sim.output_stride,
    }
}

fn l1(problem: &Problem, f: &SpeciesField, k: f64) -> f64 {
    weighted_norm(problem.grid(), f, k, NormKind::L1Poly).expect("shapes match")
}

fn slopes(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

fn conservation() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let mut sim = cfg.sim_config();
    sim.nonlinear = true;
    sim.conservative = true;
    sim.t_end = 1000.0 * sim.dt;
    sim.init.amplitude = 0.05;
    let s = Simulator::new(&problem, sim)?;
    let mut state = s.initial_state()?;
    let m = problem.maxwellian();
    let mut worst: f64 = 0.0;
    let mut prev = moments(problem.grid(), &state.cell_field(0)?).flatten();
    for _ in 0..1000 {
        s.step(&mut state)?;
        let f = state.cell_field(0)?;
        let now = moments(problem.grid(), &f).flatten();
        let scale = l1(&problem, &m.add(&f), 2.0);
        for (a, b) in now.iter().zip(&prev) {
            worst = worst.max((a - b).abs() / scale);
        }
        prev = now;
    }
    Ok(verdict(worst <= 1e-12, format!("max relative drift per step {worst:.3e} over 1000 steps")))
}

fn equilibrium() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let grid = problem.grid();
    let m = problem.maxwellian();
    let q = q_total(&problem.ws, &problem.model, &m, cfg.sim.z)?;
    let qm = l1(&problem, &q, 0.0);
    // Floor: fast vs enumerated collision sums on near-equilibrium data.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = KernelTable::at(&problem.ws, &problem.model, cfg.sim.z, 0)?;
    let ns = problem.species.len();
    let np = grid.len();
    let mut floor = 0.0;
    for i in 0..ns {
        for j in 0..ns {
            let f: Vec<f64> = m.species(i).iter().map(|x| x * (1.0 + 0.1 * rng.gen_range(-1.0..1.0))).collect();
            let g: Vec<f64> = m.species(j).iter().map(|x| x * (1.0 + 0.1 * rng.gen_range(-1.0..1.0))).collect();
            let fast = q_pair_with(&problem.ws, &table, i, j, &f, &g)?;
            let (gain, loss) = brute_force_q_pair(grid, &problem.model, i, j, &f, &g, cfg.sim.z, 0)?;
            let d: f64 = (0..np).map(|p| (fast[p] - (gain[p] - loss[p])).abs()).sum();
            floor += grid.weight() * d;
        }
    }
    Ok(verdict(qm <= 10.0 * floor, format!("||Q(M)||_L1 {qm:.3e}, quadrature floor {floor:.3e}")))
}

fn linear_structure() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let op = assemble_l_sqrt_m(&problem.ws, &problem.model, &problem.species, cfg.sim.z)?;
    let s = spectral_analysis(&op)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let norm = op.frobenius();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..500 {
        let x: Vec<f64> = (0..op.size()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lx = op.apply(&x);
        let quad: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
        let xx: f64 = x.iter().map(|a| a * a).sum();
        worst = worst.max(quad / (xx * norm));
    }
    let expected = problem.species.len() + problem.grid().dim() + 1;
    let mut sim = cfg.sim_config();
    sim.nonlinear = false;
    sim.form = PerturbationForm::SqrtWeighted;
    sim.dt = 0.1;
    sim.t_end = 60.0;
    let r = run(&problem, sim)?;
    let fit = r.decay.ok_or("no decay fit")?;
    let rel = (fit.lambda_hat - s.gap).abs() / s.gap;
    let pass = s.symmetry_defect <= 1e-9 && worst <= 1e-12 && s.zero_multiplicity == expected && s.gap > 0.0 && rel <= 0.05;
    Ok(verdict(
        pass,
        format!(
            "symmetry defect {:.2e}, max <Lf,f>/(|f|^2 |L|) {worst:.2e}, {} zero eigenvalues (expected {expected}), gap {:.5}, lambda_hat {:.5} ({:.2}% off)",
            s.symmetry_defect,
            s.zero_multiplicity,
            s.gap,
            fit.lambda_hat,
            100.0 * rel
        ),
    ))
}

fn pairing_identity() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (ns, np) = (problem.species.len(), problem.grid().len());
    let mut worst: f64 = 0.0;
    for n in 2..=5 {
        for _ in 0..20 {
            let derivs = (0..=n).map(|_| random_field(&mut rng, ns, np)).collect();
            let state = SensitivityState::new(derivs, rng.gen_range(-1.0..1.0))?;
            worst = worst.max(check_q_eqn_identity(&problem.ws, &problem.model, &state, n)?.relative());
        }
    }
    Ok(verdict(
        worst <= 1e-12,
        format!("max relative residual {worst:.3e} over n = 2..5, 20 tuples each"),
    ))
}

fn smooth_tiny() -> Res<Problem> {
    let p = tiny_problem(6)?;
    let model = KernelModel::uniform(
        0.5,
        2,
        1.0,
        AngularKind::GeneralSmooth {
            profile: ZProfile::Exp { rate: 0.7 },
            max_order: 6,
        },
        AngularCoeffs { a: 0.05, c: 0.1 },
        AngularCoeffs { a: 0.01, c: 0.02 },
    )?;
    Ok(Problem::new(p.grid(), p.species.clone(), model)?)
}

/// Relative errors of centered differences of the kernel table, the
/// collision frequency and the linearized operator against their assembled
/// first z-derivatives, one row per step in `hs`.
fn object_fd_errors(p: &Problem, z: f64, hs: &[f64]) -> Res<Vec<[f64; 3]>> {
    let n_coll = p.ws.len();
    let ns = p.species.len();
    let t1 = KernelTable::at(&p.ws, &p.model, z, 1)?;
    let nu1 = collision_frequency(&p.ws, &p.model, &p.species, z, 1, NuConvention::Standard)?;
    let l1op = assemble_linearized(&p.ws, &t1, &p.species, PerturbationForm::Additive)?;
    let mut rows = Vec::new();
    for &h in hs {
        let (tp, tm) = (KernelTable::at(&p.ws, &p.model, z + h, 0)?, KernelTable::at(&p.ws, &p.model, z - h, 0)?);
        let (mut et, mut st): (f64, f64) = (0.0, 0.0);
        for c in 0..n_coll {
            for i in 0..ns {
                for j in 0..ns {
                    let fd = (tp.get(c, i, j) - tm.get(c, i, j)) / (2.0 * h);
                    et = et.max((fd - t1.get(c, i, j)).abs());
                    st = st.max(t1.get(c, i, j).abs());
                }
            }
        }
        let nup = collision_frequency(&p.ws, &p.model, &p.species, z + h, 0, NuConvention::Standard)?;
        let num = collision_frequency(&p.ws, &p.model, &p.species, z - h, 0, NuConvention::Standard)?;
        let mut fd_nu = nup.sub(&num);
        fd_nu.scale(0.5 / h);
        let e_nu = fd_nu.sub(&nu1).max_abs() / nu1.max_abs();
        let lp = assemble_linearized(&p.ws, &tp, &p.species, PerturbationForm::Additive)?;
        let lm = assemble_linearized(&p.ws, &tm, &p.species, PerturbationForm::Additive)?;
        let fd_l = (&lp.matrix - &lm.matrix) / (2.0 * h);
        let e_l = (&fd_l - &l1op.matrix).amax() / l1op.matrix.amax();
        rows.push([et / st, e_nu, e_l]);
    }
    Ok(rows)
}

fn sensitivity_fd() -> Res<Verdict> {
    let z = 0.3;
    let hs = [0.2, 0.1, 0.05];
    // Every kernel object is affine in z for the linear family, so centered
    // differences reproduce the derivatives up to roundoff.
    let linear = tiny_problem(6)?;
    let lin_err = object_fd_errors(&linear, z, &hs)?.iter().flatten().fold(0.0f64, |m, x| m.max(*x));
    let smooth = object_fd_errors(&smooth_tiny()?, z, &hs)?;
    let mut obj_slopes = Vec::new();
    for o in 0..3 {
        obj_slopes.extend(slopes(&smooth.iter().map(|r| r[o]).collect::<Vec<_>>()));
    }

    // Trajectories: r = 1 sensitivity against collocation differences.
    let p = &linear;
    let base = SimConfig {
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
    let sens = |dt: f64| -> Res<SpeciesField> {
        let (s0, _) = SensitivityState::initial(p, &base.init, z, 1, PerturbationForm::Additive)?;
        let r = evolve_sensitivities(
            p,
            &s0,
            &SensitivityOptions {
                dt,
                t_end: base.t_end,
                output_stride: 1,
                ..SensitivityOptions::default()
            },
        )?;
        Ok(r.states.last().ok_or("empty run")?.derivs[1].clone())
    };
    let at = |zz: f64| -> Res<SpeciesField> {
        let mut c = base.clone();
        c.unknown = Unknown::Deterministic { z: zz };
        Ok(run(p, c)?.final_state.cell_field(0)?)
    };
    let d1 = sens(base.dt)?;
    let mut fd_err = Vec::new();
    for &d in &[0.4, 0.2, 0.1] {
        let mut fd = at(z + d)?.sub(&at(z - d)?);
        fd.scale(0.5 / d);
        fd_err.push(fd.sub(&d1).max_abs() / d1.max_abs());
    }
    let delta_slopes = slopes(&fd_err);
    let (a, b, c) = (sens(0.2)?, sens(0.1)?, sens(0.05)?);
    let dt_slope = (a.sub(&b).max_abs() / b.sub(&c).max_abs()).log2();

    let obj_ok = lin_err <= 1e-9 && obj_slopes.iter().all(|s| (s - 2.0).abs() <= 0.1);
    let traj_ok = delta_slopes.iter().all(|s| (s - 2.0).abs() <= 0.1) && (3.5..=4.5).contains(&dt_slope);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    Ok(verdict(
        obj_ok && traj_ok,
        format!(
            "linear-kernel object FD error {lin_err:.1e}; smooth-kernel object slopes [{}]; trajectory delta slopes [{}], dt slope {dt_slope:.3}",
            fmt(&obj_slopes),
            fmt(&delta_slopes)
        ),
    ))
}

fn decomposition() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let params = TruncationParams::new(cfg.linop.delta)?;
    let mut opts = sens_options(&cfg);
    opts.t_end = 5.0;
    let (s0, _) = SensitivityState::initial(&problem, &cfg.sim.init, cfg.sim.z, 1, cfg.sim.form)?;
    let mut worst: f64 = 0.0;
    for n in 0..=1 {
        worst = worst.max(decompose_g1_g2(&problem, &params, &s0, n, &opts)?.max_residual());
    }
    Ok(verdict(worst <= 1e-8, format!("max relative residual {worst:.3e} on [0, 5] for n = 0, 1")))
}

fn picard() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let params = TruncationParams::new(cfg.linop.delta)?;
    let n = cfg.sensitivity.n;
    let (s0, _) = SensitivityState::initial(&problem, &cfg.sim.init, cfg.sim.z, n, cfg.sim.form)?;
    let r = duhamel_picard(&problem, &params, &s0, n, &sens_options(&cfg), cfg.sensitivity.picard_iters)?;
    let max_ratio = r.ratios.iter().skip(1).fold(0.0f64, |m, x| m.max(*x));
    let pass = max_ratio < 1.0 && r.converged && r.fixed_point_error <= 1e-6;
    Ok(verdict(
        pass,
        format!(
            "max ratio (p >= 2) {max_ratio:.3}, {} iterations, fixed point error {:.3e}, proxy {:.3e} (C_Q {:.3e}, C_B {:.3e}, tau1 {:.3e}, tau2 {:.3e})",
            r.increments.len(),
            r.fixed_point_error,
            r.proxy.value,
            r.proxy.c_q,
            r.proxy.c_b,
            r.proxy.tau1,
            r.proxy.tau2
        ),
    ))
}

fn term_i() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let measure = cfg.gpc.measure;

    let basis = build_basis(measure, 4)?;
    let ctx = TermIContext::new(&problem.ws, &problem.model, &basis, &problem.species)?;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut route: f64 = 0.0;
    for _ in 0..50 {
        let f = ctx.microscopic(&random_gpc_field(&mut rng, problem.species.len(), 4, problem.grid().len()));
        for q in 0..=2 {
            let direct = ctx.term_i(&f, q)?.value;
            let sym = ctx.symmetrized(&f, q)?;
            route = route.max((direct - sym).abs() / direct.abs());
        }
    }

    let mut max_term: f64 = f64::NEG_INFINITY;
    for k in [2, 4, 6] {
        let basis = build_basis(measure, k)?;
        for q in 0..=2 {
            max_term = max_term.max(probe_term_i(&problem, &basis, q, 200, cfg.gpc.seed)?.max_value);
        }
    }

    let mut fine_cfg = cfg.clone();
    fine_cfg.grid.n_per_axis = 14;
    let fine = build_problem(&fine_cfg)?;
    let c10 = probe_term_i(&problem, &basis, 1, 200, cfg.gpc.seed)?.min_ratio;
    let c14 = probe_term_i(&fine, &basis, 1, 200, cfg.gpc.seed)?.min_ratio;
    let drift = (c14 / c10 - 1.0).abs();

    let pass = route <= 1e-9 && max_term <= 0.0 && c10 > 0.0 && c14 > 0.0 && drift <= 0.2;
    Ok(verdict(
        pass,
        format!(
            "(a) route defect {route:.2e}; (b) max Term I {max_term:.3e}; (c) C_hat {c10:.4} at n=10, {c14:.4} at n=14 ({:.1}% change)",
            100.0 * drift
        ),
    ))
}

fn tridiagonal() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let k = 6;
    let c_z = cfg.gpc.measure.c_z();
    let basis = build_basis(Measure::Uniform { c_z }, k)?;
    let sg = SgOperator::new(&problem.ws, &problem.model, &basis, &problem.species)?;
    let mut nonzero = 0usize;
    for a in 0..k {
        for b in 0..k {
            if a.abs_diff(b) >= 2 {
                nonzero += sg.block(a, b).iter().filter(|x| **x != 0.0).count();
            }
        }
    }
    let s = assemble_s_tensor(&basis, &problem.model);
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for l in 0..2 {
            for cos in [-0.95, -0.5, 0.0, 0.3, 0.8] {
                let o = s_tensor_oracle(&problem.model, i, l, cos, c_z, k)?;
                for a in 0..k {
                    for b in 0..k {
                        worst = worst.max((o[(a, b)] - s.entry(&problem.model, i, l, a, b, cos)).abs());
                    }
                }
            }
        }
    }
    Ok(verdict(
        nonzero == 0 && worst <= 1e-12,
        format!("{nonzero} nonzero entries in |k-j| >= 2 blocks (K={k}); S tensor vs quadrature {worst:.2e}"),
    ))
}

fn gpc_convergence_check() -> Res<Verdict> {
    let mut cfg = reference()?;
    cfg.kernel.profile = Some(ProfileConfig::Exp { rate: 1.0 });
    cfg.kernel.max_order = 6;
    let problem = build_problem(&cfg)?;
    let rows = gpc_convergence(&problem, &cfg.sim_config(), 6, 12)?;
    let errs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let ratio = errs[5] / errs[3];
    Ok(verdict(
        decreasing && ratio < 0.5,
        format!(
            "errors K=1..6 [{}], error(6)/error(4) {ratio:.3e}",
            errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn sensitivity_decay() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let gap = spectral_analysis(&assemble_l_plain(&problem.ws, &problem.model, &problem.species, cfg.sim.z)?)?.gap;
    // Orders n >= 1 decay like t^n e^{-λt} and cross over from a faster
    // transient near t = 25; the tail-half fit needs the whole tail past it.
    let mut opts = sens_options(&cfg);
    opts.t_end = 100.0;
    let (s0, _) = SensitivityState::initial(&problem, &cfg.sim.init, cfg.sim.z, 2, cfg.sim.form)?;
    let r = evolve_sensitivities(&problem, &s0, &opts)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, fit) in r.fits.iter().enumerate() {
        match fit {
            Some(f) => {
                pass &= f.lambda_hat > 0.0 && f.r_squared >= 0.99;
                parts.push(format!("n={n}: lambda_hat {:.5}, r2 {:.5}", f.lambda_hat, f.r_squared));
            }
            None => {
                pass = false;
                parts.push(format!("n={n}: no fit"));
            }
        }
    }
    let l0 = r.fits[0].as_ref().map_or(f64::NAN, |f| f.lambda_hat);
    let rel = (l0 - gap).abs() / gap;
    pass &= rel <= 0.05;
    Ok(verdict(
        pass,
        format!("t_end {}; {}; gap {gap:.5}, lambda_hat_0 {:.2}% off", opts.t_end, parts.join("; "), 100.0 * rel),
    ))
}

fn operator_constants() -> Res<Verdict> {
    let cfg = reference()?;
    let problem = build_problem(&cfg)?;
    let params = TruncationParams::new(cfg.linop.delta)?;
    let split = split_ab(&problem.ws, &problem.model, &problem.species, &params, cfg.sim.z, 0)?;
    let ks: Vec<f64> = (0..=8).map(f64::from).collect();
    let c = estimate_operator_constants(problem.grid(), &problem.species, &split, &ks, cfg.linop.beta, cfg.linop.probes, cfg.linop.seed)?;
    let last = c.rows.last().ok_or("empty sweep")?.c_b_hat;
    Ok(verdict(
        c.b_nonincreasing() && last < 1.0,
        format!(
            "C_B_hat k=0..8 [{}], nonincreasing {}, k0_hat {:?}",
            c.rows.iter().map(|r| format!("{:.4}", r.c_b_hat)).collect::<Vec<_>>().join(", "),
            c.b_nonincreasing(),
            c.k0_hat
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Res<Verdict>); 12] = [
        (1, "conservation", conservation),
        (2, "equilibrium annihilation", equilibrium),
        (3, "linearized structure", linear_structure),
        (4, "pairing identity", pairing_identity),
        (5, "sensitivity vs finite differences", sensitivity_fd),
        (6, "g1/g2 decomposition", decomposition),
        (7, "Duhamel contraction", picard),
        (8, "SG Term I", term_i),
        (9, "tridiagonal SG structure", tridiagonal),
        (10, "gPC spectral convergence", gpc_convergence_check),
        (11, "sensitivity decay", sensitivity_decay),
        (12, "operator constants", operator_constants),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut unexpected = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (v.pass, known) {
            (true, false) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known)",
            (true, true) => "PASS (listed as known failure)",
        };
        if v.pass == known {
            unexpected += 1;
        }
        println!("{tag:<12} {id:>2} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), v.detail);
    }
    if unexpected > 0 {
        println!("{unexpected} unexpected outcome(s)");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
