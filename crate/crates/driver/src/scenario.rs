//! Scenario orchestration. Each scenario writes CSV files and returns the
//! checks it evaluated; the caller turns failed checks into an exit status.

use std::fmt;
use std::io;
use std::str::FromStr;

use kmsuq_core::gpc::{build_basis, reconstruct_and_error, GpcBasis, GpcField, TermIContext};
use kmsuq_core::grid::{write_field_csv, PerturbationForm, SpeciesField};
use kmsuq_core::kernel::validate_assumptions;
use kmsuq_core::linop::{assemble_l_plain, assemble_l_sqrt_m, estimate_operator_constants, spectral_analysis, split_ab, TruncationParams};
use kmsuq_core::sensitivity::{check_q_eqn_identity, decompose_g1_g2, duhamel_picard, evolve_sensitivities, SensitivityOptions, SensitivityState};
use kmsuq_core::solver::{collocation_reference, run, Problem, SimConfig, Unknown};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::oracle::oracle_suite;
use crate::output::{num, OutputDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Relax,
    Spectrum,
    GapSg,
    Sensitivity,
    Decompose,
    Picard,
    Assumptions,
    ConvergeGpc,
    Oracle,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::Relax,
        Scenario::Spectrum,
        Scenario::GapSg,
        Scenario::Sensitivity,
        Scenario::Decompose,
        Scenario::Picard,
        Scenario::Assumptions,
        Scenario::ConvergeGpc,
        Scenario::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Relax => "relax",
            Scenario::Spectrum => "spectrum",
            Scenario::GapSg => "gap-sg",
            Scenario::Sensitivity => "sensitivity",
            Scenario::Decompose => "decompose",
            Scenario::Picard => "picard",
            Scenario::Assumptions => "assumptions",
            Scenario::ConvergeGpc => "converge-gpc",
            Scenario::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Scenario::ALL.iter().find(|x| x.name() == s).copied().ok_or_else(|| {
            let names: Vec<&str> = Scenario::ALL.iter().map(|x| x.name()).collect();
            format!("unknown scenario `{s}`; expected one of {}", names.join(", "))
        })
    }
}

/// One evaluated inequality or tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    /// Fails the run even outside strict mode.
    pub hard: bool,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
            hard: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    /// Missing or inconsistent scenario-specific settings.
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] kmsuq_core::Error),
    #[error("output: {0}")]
    Io(#[from] io::Error),
}

type Outcome = Result<Vec<Check>, ScenarioError>;

pub fn build_problem(cfg: &RunConfig) -> Result<Problem, ScenarioError> {
    Ok(Problem::new(&cfg.build_grid()?, cfg.build_species()?, cfg.build_kernel()?)?)
}

pub fn run_scenario(scenario: Scenario, cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    out.text("config.toml", &cfg.dump())?;
    match scenario {
        Scenario::Relax => relax(cfg, out),
        Scenario::Spectrum => spectrum(cfg, out),
        Scenario::GapSg => gap_sg(cfg, out),
        Scenario::Sensitivity => sensitivity(cfg, out),
        Scenario::Decompose => decompose(cfg, out),
        Scenario::Picard => picard(cfg, out),
        Scenario::Assumptions => assumptions(cfg, out),
        Scenario::ConvergeGpc => converge_gpc(cfg, out),
        Scenario::Oracle => oracle(out),
    }
}

fn relax(cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    let problem = build_problem(cfg)?;
    let r = run(&problem, cfg.sim_config())?;
    let n = problem.species.len();
    let dim = problem.grid().dim();
    let mut header: Vec<String> = ["t", "micro_norm", "hydro_norm", "hilbert_norm", "entropy", "min_density"]
        .map(String::from)
        .to_vec();
    header.extend((0..n).map(|i| format!("mass_{i}")));
    header.extend(["momentum_x", "momentum_y", "momentum_z"].iter().take(dim).map(|s| s.to_string()));
    header.push("energy".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..r.times.len()).map(|s| {
        let mut row = vec![
            num(r.times[s]),
            num(r.micro_norm[s]),
            num(r.hydro_norm[s]),
            num(r.hilbert_norm[s]),
            num(r.entropy[s]),
            num(r.min_density[s]),
        ];
        row.extend(r.moments[s].flatten().into_iter().map(num));
        row
    });
    out.csv("relax.csv", &header, rows)?;
    if let Some(fit) = r.decay {
        out.csv(
            "decay_fit.csv",
            &["c_hat", "lambda_hat", "r_squared", "decaying", "positive_subset"],
            [vec![
                num(fit.c_hat),
                num(fit.lambda_hat),
                num(fit.r_squared),
                fit.decaying.to_string(),
                fit.positive_subset.to_string(),
            ]],
        )?;
    }
    if cfg.output.field_csv && r.final_state.nx == 1 && matches!(cfg.sim_config().unknown, Unknown::Deterministic { .. }) {
        let mut buf = Vec::new();
        write_field_csv(problem.grid(), &r.final_state.cell_field(0)?, &mut buf)?;
        out.text("final_field.csv", &String::from_utf8_lossy(&buf))?;
    }
    let min_f = r.min_density.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(vec![
        Check::new(
            "entropy monotone",
            r.entropy_monotone,
            format!("final entropy {:.3e}", r.entropy.last().copied().unwrap_or(0.0)),
        ),
        Check::new("density positive", min_f > 0.0, format!("min F = {min_f:.3e}")),
    ])
}

fn spectrum(cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    let problem = build_problem(cfg)?;
    let z = cfg.sim.z;
    let op = match cfg.sim.form {
        PerturbationForm::SqrtWeighted => assemble_l_sqrt_m(&problem.ws, &problem.model, &problem.species, z)?,
        PerturbationForm::Additive => assemble_l_plain(&problem.ws, &problem.model, &problem.species, z)?,
    };
    let s = spectral_analysis(&op)?;
    out.csv(
        "eigenvalues.csv",
        &["index", "eigenvalue"],
        s.eigenvalues.iter().enumerate().map(|(i, e)| vec![i.to_string(), num(*e)]),
    )?;
    let expected = problem.species.len() + problem.grid().dim() + 1;
    out.csv(
        "spectrum_summary.csv",
        &[
            "size",
            "zero_multiplicity",
            "expected_multiplicity",
            "gap",
            "tol_zero",
            "symmetry_defect",
            "matrix_free",
        ],
        [vec![
            op.size().to_string(),
            s.zero_multiplicity.to_string(),
            expected.to_string(),
            num(s.gap),
            num(s.tol_zero),
            num(s.symmetry_defect),
            s.matrix_free.to_string(),
        ]],
    )?;
    let params = TruncationParams::new(cfg.linop.delta)?;
    let split = split_ab(&problem.ws, &problem.model, &problem.species, &params, z, 0)?;
    let ks: Vec<f64> = (0..=cfg.linop.k_max).map(|k| k as f64).collect();
    let c = estimate_operator_constants(problem.grid(), &problem.species, &split, &ks, cfg.linop.beta, cfg.linop.probes, cfg.linop.seed)?;
    out.csv(
        "constants.csv",
        &["k", "c_a_hat", "c_b_hat"],
        c.rows.iter().map(|r| vec![num(r.k), num(r.c_a_hat), num(r.c_b_hat)]),
    )?;
    out.csv("k0_hat.csv", &["k0_hat"], [vec![c.k0_hat.map_or("none".into(), num)]])?;
    Ok(vec![
        Check::new("gap positive", s.gap > 0.0, format!("gap {:.6e}", s.gap)),
        Check::new(
            "kernel dimension",
            s.zero_multiplicity == expected,
            format!("{} zero eigenvalues, expected {expected}", s.zero_multiplicity),
        ),
        Check::new("symmetric", s.symmetry_defect <= 1e-9, format!("defect {:.3e}", s.symmetry_defect)),
        Check::new("C_B nonincreasing in k", c.b_nonincreasing(), format!("k0_hat {:?}", c.k0_hat)),
    ])
}

/// Random gPC fields with entries in `[-1, 1]`.
pub fn random_gpc_field(rng: &mut ChaCha8Rng, n_species: usize, n_modes: usize, n_points: usize) -> GpcField {
    let data = (0..n_species * n_modes * n_points).map(|_| rng.gen_range(-1.0..1.0)).collect();
    GpcField::from_values(n_species, n_modes, n_points, data).expect("sized")
}

/// Term I over random probes for one `(K, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TermIProbe {
    pub k: usize,
    pub q: u32,
    pub max_value: f64,
    /// `Ĉ = min -TermI / Σ k^{2q} ‖f_k‖²_Λ`
    pub min_ratio: f64,
    pub max_route_defect: f64,
    /// Largest `direct - D-route`; nonpositive when the bound holds.
    pub max_bound_excess: f64,
}

pub fn probe_term_i(problem: &Problem, basis: &GpcBasis, q: u32, probes: usize, seed: u64) -> Result<TermIProbe, ScenarioError> {
    let ctx = TermIContext::new(&problem.ws, &problem.model, basis, &problem.species)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = TermIProbe {
        k: basis.n_modes(),
        q,
        max_value: f64::NEG_INFINITY,
        min_ratio: f64::INFINITY,
        max_route_defect: 0.0,
        max_bound_excess: f64::NEG_INFINITY,
    };
    for _ in 0..probes {
        let f = random_gpc_field(&mut rng, problem.species.len(), basis.n_modes(), problem.grid().len());
        let r = ctx.term_i(&f, q)?;
        let sym = ctx.symmetrized(&f, q)?;
        let d = ctx.d_route(&f, q)?;
        p.max_value = p.max_value.max(r.value);
        if let Some(ratio) = r.ratio {
            p.min_ratio = p.min_ratio.min(ratio);
        }
        p.max_route_defect = p.max_route_defect.max((r.value - sym).abs() / r.value.abs().max(f64::MIN_POSITIVE));
        p.max_bound_excess = p.max_bound_excess.max(sym - d);
    }
    Ok(p)
}

fn gap_sg(cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    let problem = build_problem(cfg)?;
    let c_z = cfg.gpc.measure.c_z();
    let mut checks = Vec::new();
    let mut d_rows = Vec::new();
    for &q in &cfg.gpc.q_values {
        let rep = validate_assumptions(&problem.model, q, c_z, cfg.sensitivity.r, problem.grid().angular())?;
        let d = rep.min_d();
        d_rows.push(vec![q.to_string(), num(d)]);
        checks.push(Check::new(format!("D_il > 0 for q={q}"), d > 0.0, format!("min D = {d:.4e}")));
    }
    out.csv("d_margin.csv", &["q", "min_d"], d_rows)?;
    let mut rows = Vec::new();
    for &k in &cfg.gpc.k_values {
        let basis = build_basis(cfg.gpc.measure, k)?;
        for &q in &cfg.gpc.q_values {
            let p = probe_term_i(&problem, &basis, q, cfg.gpc.probes, cfg.gpc.seed)?;
            rows.push(vec![
                k.to_string(),
                q.to_string(),
                num(p.max_value),
                num(p.min_ratio),
                num(p.max_route_defect),
                num(p.max_bound_excess),
            ]);
            checks.push(Check::new(
                format!("Term I <= 0 (K={k}, q={q})"),
                p.max_value <= 0.0,
                format!("max {:.3e}", p.max_value),
            ));
            checks.push(Check::new(
                format!("C_hat > 0 (K={k}, q={q})"),
                p.min_ratio > 0.0,
                format!("C_hat {:.4e}", p.min_ratio),
            ));
            checks.push(Check::new(
                format!("routes agree (K={k}, q={q})"),
                p.max_route_defect <= 1e-9,
                format!("relative defect {:.3e}", p.max_route_defect),
            ));
        }
    }
    out.csv("gap_sg.csv", &["K", "q", "max_term_i", "c_hat", "route_defect", "bound_excess"], rows)?;
    Ok(checks)
}

fn sensitivity_options(cfg: &RunConfig) -> SensitivityOptions {
    let m = &cfg.sim;
    SensitivityOptions {
        dt: m.dt,
        t_end: m.t_end,
        scheme: m.scheme,
        form: m.form,
        nonlinear: m.nonlinear,
        conservative: m.conservative,
        k_weight: m.k_weight,
        output_stride: m.output_stride,
    }
}

fn deterministic_only(cfg: &RunConfig) -> Result<(), ScenarioError> {
    if cfg.sim.mode != kmsuq_core::solver::SpatialMode::Homogeneous {
        return Err(ScenarioError::Config("this scenario needs sim.mode = \"homogeneous\"".into()));
    }
    Ok(())
}

fn sensitivity(cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    deterministic_only(cfg)?;
    let problem = build_problem(cfg)?;
    let r = cfg.sensitivity.r;
    let (s0, removed) = SensitivityState::initial(&problem, &cfg.sim.init, cfg.sim.z, r, cfg.sim.form)?;
    let run = evolve_sensitivities(&problem, &s0, &sensitivity_options(cfg))?;
    let mut header = vec!["t".to_string()];
    header.extend((0..=r).map(|n| format!("norm_{n}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "sensitivity.csv",
        &header,
        (0..run.times.len()).map(|s| {
            let mut row = vec![num(run.times[s])];
            row.extend(run.norms.iter().map(|n| num(n[s])));
            row
        }),
    )?;
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for (n, fit) in run.fits.iter().enumerate() {
        match fit {
            Some(f) => {
                rows.push(vec![
                    n.to_string(),
                    num(removed[n]),
                    num(f.c_hat),
                    num(f.lambda_hat),
                    num(f.r_squared),
                    f.decaying.to_string(),
                ]);
                checks.push(Check::new(
                    format!("order {n} decays"),
                    f.decaying,
                    format!("lambda_hat {:.4e}, r2 {:.5}", f.lambda_hat, f.r_squared),
                ));
            }
            None => {
                rows.push(vec![
                    n.to_string(),
                    num(removed[n]),
                    "none".into(),
                    "none".into(),
                    "none".into(),
                    "false".into(),
                ]);
                checks.push(Check::new(format!("order {n} decays"), false, "too few samples to fit"));
            }
        }
    }
    out.csv(
        "sensitivity_fits.csv",
        &["n", "projected_mass", "c_hat", "lambda_hat", "r_squared", "decaying"],
        rows,
    )?;
    let last = run.states.last().expect("initial state recorded");
    let mut id_rows = Vec::new();
    for n in 2..=r {
        let c = check_q_eqn_identity(&problem.ws, &problem.model, last, n)?;
        id_rows.push(vec![n.to_string(), num(c.relative())]);
        checks.push(Check::new(
            format!("pairing identity n={n}"),
            c.relative() <= 1e-12,
            format!("relative residual {:.3e}", c.relative()),
        ));
    }
    out.csv("pairing_identity.csv", &["n", "relative_residual"], id_rows)?;
    Ok(checks)
}

fn additive_only(cfg: &RunConfig) -> Result<(), ScenarioError> {
    deterministic_only(cfg)?;
    if cfg.sim.form != PerturbationForm::Additive {
        return Err(ScenarioError::Config("the A/B decomposition needs sim.form = \"additive\"".into()));
    }
    Ok(())
}

fn decompose(cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    additive_only(cfg)?;
    let problem = build_problem(cfg)?;
    let params = TruncationParams::new(cfg.linop.delta)?;
    let (s0, _) = SensitivityState::initial(&problem, &cfg.sim.init, cfg.sim.z, cfg.sensitivity.n, cfg.sim.form)?;
    let mut checks = Vec::new();
    for n in 0..=cfg.sensitivity.n {
        let d = decompose_g1_g2(&problem, &params, &s0, n, &sensitivity_options(cfg))?;
        out.csv(
            &format!("decompose_n{n}.csv"),
            &["t", "g1_norm", "g2_norm", "residual"],
            (0..d.times.len()).map(|s| vec![num(d.times[s]), num(d.g1_norm[s]), num(d.g2_norm[s]), num(d.residual[s])]),
        )?;
        checks.push(Check::new(
            format!("g1 + g2 recombines (n={n})"),
            d.max_residual() <= 1e-8,
            format!("max relative residual {:.3e}", d.max_residual()),
        ));
    }
    Ok(checks)
}

fn picard(cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    additive_only(cfg)?;
    let problem = build_problem(cfg)?;
    let params = TruncationParams::new(cfg.linop.delta)?;
    let n = cfg.sensitivity.n;
    let (s0, _) = SensitivityState::initial(&problem, &cfg.sim.init, cfg.sim.z, n, cfg.sim.form)?;
    let r = duhamel_picard(&problem, &params, &s0, n, &sensitivity_options(cfg), cfg.sensitivity.picard_iters)?;
    out.csv(
        "picard.csv",
        &["p", "increment", "ratio"],
        r.increments
            .iter()
            .enumerate()
            .map(|(p, inc)| vec![p.to_string(), num(*inc), if p == 0 { "none".into() } else { num(r.ratios[p - 1]) }]),
    )?;
    let x = r.proxy;
    out.csv(
        "picard_summary.csv",
        &["converged", "fixed_point_error", "c_q", "c_b", "tau1", "tau2", "proxy", "regime_exit"],
        [vec![
            r.converged.to_string(),
            num(r.fixed_point_error),
            num(x.c_q),
            num(x.c_b),
            num(x.tau1),
            num(x.tau2),
            num(x.value),
            r.regime_exit.to_string(),
        ]],
    )?;
    Ok(vec![
        Check::new(
            "ratios below one for p >= 2",
            !r.regime_exit,
            format!("ratios {:?}", r.ratios.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()),
        ),
        Check::new("iteration converged", r.converged, format!("{} iterations", r.increments.len())),
        Check::new(
            "fixed point matches time stepping",
            r.fixed_point_error <= 1e-6,
            format!("error {:.3e}", r.fixed_point_error),
        ),
    ])
}

fn assumptions(cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    let model = cfg.build_kernel()?;
    let grid = cfg.build_grid()?;
    let r = cfg.sensitivity.r;
    let rep = validate_assumptions(&model, cfg.gpc.q, cfg.gpc.measure.c_z(), r, grid.angular())?;
    let mut header: Vec<String> = ["i", "j", "symmetry_residual", "min_b", "max_b"].map(String::from).to_vec();
    header.extend((0..=r).map(|k| format!("max_deriv_{k}")));
    header.extend(["max_b1", "d_min", "d_max", "overlap_lower"].map(String::from));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "assumptions.csv",
        &header,
        rep.pairs.iter().map(|p| {
            let mut row = vec![p.i.to_string(), p.j.to_string(), num(p.symmetry_residual), num(p.min_b), num(p.max_b)];
            row.extend(p.max_deriv.iter().map(|x| num(*x)));
            row.extend([num(p.max_b1), num(p.d_min), num(p.d_max), p.overlap_lower.map_or("none".into(), num)]);
            row
        }),
    )?;
    out.csv(
        "assumption_bounds.csv",
        &["c_b", "c_b1", "q", "c_z", "r"],
        [vec![num(rep.c_b), num(rep.c_b1), rep.q.to_string(), num(rep.c_z), rep.r.to_string()]],
    )?;
    Ok(vec![Check::new(
        "all kernel assumptions hold",
        rep.all_pass(),
        format!("min D = {:.4e}", rep.min_d()),
    )])
}

/// gPC error against collocation for `K = 1..=k_max`, with the reference at
/// the nodes of a `reference_modes`-point Gauss rule of the law of `z`.
pub fn gpc_convergence(problem: &Problem, sim: &SimConfig, k_max: usize, reference_modes: usize) -> Result<Vec<(usize, f64, f64)>, ScenarioError> {
    let rule = build_basis(sim.measure, reference_modes)?.quadrature().clone();
    let mut det = sim.clone();
    det.unknown = Unknown::Deterministic { z: 0.0 };
    let refs: Vec<SpeciesField> = collocation_reference(problem, &det, &rule.nodes)?
        .into_iter()
        .map(|r| r.final_state.cell_field(0))
        .collect::<kmsuq_core::Result<_>>()?;
    let mut rows = Vec::new();
    for k in 1..=k_max {
        let basis = build_basis(sim.measure, k)?;
        let mut c = sim.clone();
        c.unknown = Unknown::Sg { k, q: 0 };
        let r = run(problem, c)?;
        let e = reconstruct_and_error(&basis, problem.grid(), &r.final_state.cell_gpc(0)?, &rule.nodes, &rule.weights, &refs)?;
        rows.push((k, e.l2_pi, e.max_sample));
    }
    Ok(rows)
}

fn converge_gpc(cfg: &RunConfig, out: &mut OutputDir) -> Outcome {
    let problem = build_problem(cfg)?;
    let rows = gpc_convergence(&problem, &cfg.sim_config(), cfg.gpc.k_max, cfg.gpc.reference_modes)?;
    out.csv(
        "converge_gpc.csv",
        &["K", "l2_pi_error", "max_sample_error"],
        rows.iter().map(|(k, e, m)| vec![k.to_string(), num(*e), num(*m)]),
    )?;
    let decreasing = rows.windows(2).all(|w| w[1].1 < w[0].1);
    let mut checks = vec![Check::new(
        "error strictly decreasing in K",
        decreasing,
        format!("{:?}", rows.iter().map(|r| format!("{:.2e}", r.1)).collect::<Vec<_>>()),
    )];
    if rows.len() >= 3 {
        let ratio = rows[rows.len() - 1].1 / rows[rows.len() - 3].1;
        checks.push(Check::new("error(K_max) / error(K_max - 2) < 0.5", ratio < 0.5, format!("ratio {ratio:.3e}")));
    }
    Ok(checks)
}

fn oracle(out: &mut OutputDir) -> Outcome {
    let checks = oracle_suite()?;
    out.csv(
        "oracle.csv",
        &["check", "error", "tolerance", "margin", "pass"],
        checks
            .iter()
            .map(|c| vec![c.name.clone(), num(c.error), num(c.tolerance), num(c.margin()), c.pass().to_string()]),
    )?;
    Ok(checks
        .into_iter()
        .map(|c| Check {
            pass: c.pass(),
            detail: format!("error {:.3e}, tolerance {:.1e}", c.error, c.tolerance),
            name: c.name,
            hard: true,
        })
        .collect())
}
