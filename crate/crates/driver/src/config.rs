//! Run configuration: a TOML document with the sections `[grid]`,
//! `[species]`, `[kernel]`, `[gpc]`, `[sim]`, `[sensitivity]`, `[linop]` and
//! `[output]`. Every key is optional and has a default; unknown keys and
//! sections are rejected. All violations are collected before reporting.

use std::fmt::{self, Write as _};
use std::path::Path;

use kmsuq_core::gpc::Measure;
use kmsuq_core::grid::{PerturbationForm, SpeciesSet, VelocityGrid};
use kmsuq_core::kernel::{AngularCoeffs, AngularKind, KernelModel, ZProfile};
use kmsuq_core::sensitivity::MAX_ORDER;
use kmsuq_core::solver::{PerturbationSpec, SimConfig, SpatialMode, TimeScheme, Unknown};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// `section.key`
    pub key: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{} configuration error(s):\n{}", .0.len(), .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub dim: usize,
    pub n_per_axis: usize,
    pub radius: f64,
    pub angular_resolution: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesConfig {
    pub c_inf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileConfig {
    Exp { rate: f64 },
    Sin { freq: f64, phase: f64 },
    Poly { coeffs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub gamma: f64,
    /// `N × N`, filled with ones when absent.
    pub c_phi: Vec<Vec<f64>>,
    /// `None` for the linear-in-z family.
    pub profile: Option<ProfileConfig>,
    pub max_order: usize,
    pub b0: AngularCoeffs,
    pub b1: AngularCoeffs,
    /// Derived from the coefficients when absent.
    pub c_b: Option<f64>,
    pub c_b1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpcConfig {
    pub measure: Measure,
    pub k: usize,
    pub q: u32,
    pub k_values: Vec<usize>,
    pub q_values: Vec<u32>,
    pub probes: usize,
    pub seed: u64,
    pub k_max: usize,
    /// Order of the Gauss rule whose nodes carry the collocation reference.
    pub reference_modes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSection {
    pub mode: SpatialMode,
    pub unknown: UnknownKind,
    pub z: f64,
    pub scheme: TimeScheme,
    pub form: PerturbationForm,
    pub nonlinear: bool,
    pub conservative: bool,
    pub dt: f64,
    pub t_end: f64,
    pub output_stride: usize,
    pub k_weight: f64,
    pub init: PerturbationSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownKind {
    Deterministic,
    Sg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityConfig {
    pub r: usize,
    /// Order studied by the decomposition and Picard scenarios.
    pub n: usize,
    pub picard_iters: usize,
    pub fd_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinopConfig {
    pub delta: f64,
    pub beta: f64,
    pub probes: usize,
    pub k_max: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: String,
    pub field_csv: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub species: SpeciesConfig,
    pub kernel: KernelConfig,
    pub gpc: GpcConfig,
    pub sim: SimSection,
    pub sensitivity: SensitivityConfig,
    pub linop: LinopConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_str("").expect("defaults are valid")
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("grid", &["dim", "n_per_axis", "radius", "angular_resolution"]),
    ("species", &["c_inf"]),
    (
        "kernel",
        &[
            "gamma",
            "c_phi",
            "kind",
            "b0_a",
            "b0_c",
            "b1_a",
            "b1_c",
            "profile",
            "rate",
            "freq",
            "phase",
            "coeffs",
            "max_order",
            "c_b",
            "c_b1",
        ],
    ),
    (
        "gpc",
        &[
            "measure",
            "c_z",
            "alpha",
            "beta",
            "k",
            "q",
            "k_values",
            "q_values",
            "probes",
            "seed",
            "k_max",
            "reference_modes",
        ],
    ),
    (
        "sim",
        &[
            "mode",
            "nx",
            "period",
            "unknown",
            "z",
            "scheme",
            "form",
            "nonlinear",
            "conservative",
            "dt",
            "t_end",
            "output_stride",
            "k_weight",
            "amplitude",
            "shift",
            "width",
            "z_rate",
            "x_offset",
            "x_wavenumber",
            "microscopic",
        ],
    ),
    ("sensitivity", &["r", "n", "picard_iters", "fd_delta"]),
    ("linop", &["delta", "beta", "probes", "k_max", "seed"]),
    ("output", &["dir", "field_csv"]),
];

fn suggest<'a>(word: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (strsim::levenshtein(word, c), c))
        .filter(|(d, c)| *d <= 2.max(c.len() / 3))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c)
}

/// Typed reads from one section, recording every violation.
struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    errors: &'a mut Vec<Violation>,
}

impl Section<'_> {
    fn raw(&self, key: &str) -> Option<&Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn err(&mut self, key: &str, message: impl Into<String>) {
        self.errors.push(Violation {
            key: format!("{}.{key}", self.name),
            message: message.into(),
        });
    }

    fn f64(&mut self, key: &str, default: f64) -> f64 {
        match self.raw(key) {
            None => default,
            Some(Value::Float(x)) if x.is_finite() => *x,
            Some(Value::Integer(i)) => *i as f64,
            Some(_) => {
                self.err(key, "expected a finite number");
                default
            }
        }
    }

    fn opt_f64(&mut self, key: &str) -> Option<f64> {
        self.raw(key)?;
        Some(self.f64(key, f64::NAN))
    }

    fn uint(&mut self, key: &str, default: u64) -> u64 {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => {
                self.err(key, "expected a non-negative integer");
                default
            }
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> usize {
        self.uint(key, default as u64) as usize
    }

    fn bool(&mut self, key: &str, default: bool) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.err(key, "expected true or false");
                default
            }
        }
    }

    fn choice(&mut self, key: &str, options: &[&'static str], default: &'static str) -> &'static str {
        match self.raw(key) {
            None => default,
            Some(Value::String(s)) => match options.iter().find(|o| **o == s.as_str()) {
                Some(o) => o,
                None => {
                    let hint = suggest(s, options.iter().copied())
                        .map(|h| format!(" (did you mean `{h}`?)"))
                        .unwrap_or_default();
                    self.err(key, format!("`{s}` is not one of {}{hint}", options.join(", ")));
                    default
                }
            },
            Some(_) => {
                self.err(key, format!("expected one of {}", options.join(", ")));
                default
            }
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        match self.raw(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                self.err(key, "expected a string");
                default.to_string()
            }
        }
    }

    fn f64_list(&mut self, key: &str, default: &[f64]) -> Vec<f64> {
        match self.raw(key) {
            None => default.to_vec(),
            Some(Value::Array(a)) => {
                let out: Option<Vec<f64>> = a
                    .iter()
                    .map(|v| match v {
                        Value::Float(x) if x.is_finite() => Some(*x),
                        Value::Integer(i) => Some(*i as f64),
                        _ => None,
                    })
                    .collect();
                out.unwrap_or_else(|| {
                    self.err(key, "expected an array of numbers");
                    default.to_vec()
                })
            }
            Some(_) => {
                self.err(key, "expected an array of numbers");
                default.to_vec()
            }
        }
    }

    fn uint_list(&mut self, key: &str, default: &[u64]) -> Vec<u64> {
        match self.raw(key) {
            None => default.to_vec(),
            Some(Value::Array(a)) => {
                let out: Option<Vec<u64>> = a
                    .iter()
                    .map(|v| match v {
                        Value::Integer(i) if *i >= 0 => Some(*i as u64),
                        _ => None,
                    })
                    .collect();
                out.unwrap_or_else(|| {
                    self.err(key, "expected an array of non-negative integers");
                    default.to_vec()
                })
            }
            Some(_) => {
                self.err(key, "expected an array of non-negative integers");
                default.to_vec()
            }
        }
    }

    /// A scalar (filled into every entry) or a nested `N × N` array.
    fn matrix(&mut self, key: &str, n: usize) -> Vec<Vec<f64>> {
        let fill = |x: f64| vec![vec![x; n]; n];
        match self.raw(key) {
            None => fill(1.0),
            Some(Value::Float(_)) | Some(Value::Integer(_)) => fill(self.f64(key, 1.0)),
            Some(Value::Array(rows)) => {
                let parsed: Option<Vec<Vec<f64>>> = rows
                    .iter()
                    .map(|r| match r {
                        Value::Array(r) => r
                            .iter()
                            .map(|v| match v {
                                Value::Float(x) if x.is_finite() => Some(*x),
                                Value::Integer(i) => Some(*i as f64),
                                _ => None,
                            })
                            .collect(),
                        _ => None,
                    })
                    .collect();
                parsed.unwrap_or_else(|| {
                    self.err(key, "expected a number or an array of number arrays");
                    fill(1.0)
                })
            }
            Some(_) => {
                self.err(key, "expected a number or an array of number arrays");
                fill(1.0)
            }
        }
    }

    fn reject_unknown(&mut self, known: &[&str]) {
        let Some(table) = self.table else { return };
        let unknown: Vec<String> = table.keys().filter(|k| !known.contains(&k.as_str())).cloned().collect();
        for k in unknown {
            let hint = suggest(&k, known.iter().copied()).map(|h| format!("; did you mean `{h}`?")).unwrap_or_default();
            self.err(&k, format!("unknown key{hint}"));
        }
    }
}

fn syntax_error(text: &str, e: toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    ConfigError::Syntax {
        line,
        column,
        message: e.message().to_string(),
    }
}

pub fn parse_file(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let doc: Table = toml::from_str(text).map_err(|e| syntax_error(text, e))?;
    let mut errors = Vec::new();
    let mut tables = std::collections::HashMap::new();
    for (name, value) in &doc {
        match (SECTIONS.iter().find(|(s, _)| s == name), value) {
            (Some(_), Value::Table(t)) => {
                tables.insert(name.as_str(), t);
            }
            (Some(_), _) => errors.push(Violation {
                key: name.clone(),
                message: "expected a section".into(),
            }),
            (None, _) => {
                let hint = suggest(name, SECTIONS.iter().map(|(s, _)| *s))
                    .map(|h| format!("; did you mean `[{h}]`?"))
                    .unwrap_or_default();
                errors.push(Violation {
                    key: name.clone(),
                    message: format!("unknown section{hint}"),
                });
            }
        }
    }
    let section = |name: &'static str, errors: &mut Vec<Violation>, f: &mut dyn FnMut(&mut Section)| {
        let known = SECTIONS.iter().find(|(s, _)| *s == name).expect("listed").1;
        let mut s = Section {
            name,
            table: tables.get(name).copied(),
            errors,
        };
        f(&mut s);
        s.reject_unknown(known);
    };

    let mut grid = None;
    section("grid", &mut errors, &mut |s| {
        grid = Some(GridConfig {
            dim: s.usize("dim", 2),
            n_per_axis: s.usize("n_per_axis", 10),
            radius: s.f64("radius", 5.0),
            angular_resolution: s.usize("angular_resolution", 16),
        })
    });
    let mut species = None;
    section("species", &mut errors, &mut |s| {
        species = Some(SpeciesConfig {
            c_inf: s.f64_list("c_inf", &[1.0, 1.0]),
        })
    });
    let n_species = species.as_ref().map_or(2, |s| s.c_inf.len());
    let mut kernel = None;
    section("kernel", &mut errors, &mut |s| {
        let gamma = s.f64("gamma", 0.0);
        let c_phi = s.matrix("c_phi", n_species);
        let kind = s.choice("kind", &["linear_in_z", "general_smooth"], "linear_in_z");
        let profile = if kind == "general_smooth" {
            Some(match s.choice("profile", &["exp", "sin", "poly"], "exp") {
                "exp" => ProfileConfig::Exp { rate: s.f64("rate", 1.0) },
                "sin" => ProfileConfig::Sin {
                    freq: s.f64("freq", 1.0),
                    phase: s.f64("phase", 0.0),
                },
                _ => ProfileConfig::Poly {
                    coeffs: s.f64_list("coeffs", &[0.0, 1.0]),
                },
            })
        } else {
            for k in ["profile", "rate", "freq", "phase", "coeffs", "max_order"] {
                if s.raw(k).is_some() {
                    s.err(k, "only used with kind = \"general_smooth\"");
                }
            }
            None
        };
        kernel = Some(KernelConfig {
            gamma,
            c_phi,
            max_order: s.usize("max_order", MAX_ORDER),
            profile,
            b0: AngularCoeffs {
                a: s.f64("b0_a", 0.0),
                c: s.f64("b0_c", 0.1),
            },
            b1: AngularCoeffs {
                a: s.f64("b1_a", 0.0),
                c: s.f64("b1_c", 0.01),
            },
            c_b: s.opt_f64("c_b"),
            c_b1: s.opt_f64("c_b1"),
        })
    });
    let mut gpc = None;
    section("gpc", &mut errors, &mut |s| {
        let c_z = s.f64("c_z", 1.0);
        let measure = match s.choice("measure", &["uniform", "beta"], "uniform") {
            "uniform" => {
                for k in ["alpha", "beta"] {
                    if s.raw(k).is_some() {
                        s.err(k, "only used with measure = \"beta\"");
                    }
                }
                Measure::Uniform { c_z }
            }
            _ => Measure::Beta {
                alpha: s.f64("alpha", 0.0),
                beta: s.f64("beta", 0.0),
                c_z,
            },
        };
        gpc = Some(GpcConfig {
            measure,
            k: s.usize("k", 4),
            q: s.uint("q", 1) as u32,
            k_values: s.uint_list("k_values", &[2, 4, 6]).into_iter().map(|k| k as usize).collect(),
            q_values: s.uint_list("q_values", &[0, 1, 2]).into_iter().map(|q| q as u32).collect(),
            probes: s.usize("probes", 200),
            seed: s.uint("seed", 1),
            k_max: s.usize("k_max", 6),
            reference_modes: s.usize("reference_modes", 12),
        })
    });
    let mut sim = None;
    section("sim", &mut errors, &mut |s| {
        let mode = match s.choice("mode", &["homogeneous", "torus1d"], "homogeneous") {
            "homogeneous" => {
                for k in ["nx", "period"] {
                    if s.raw(k).is_some() {
                        s.err(k, "only used with mode = \"torus1d\"");
                    }
                }
                SpatialMode::Homogeneous
            }
            _ => SpatialMode::Torus1d {
                nx: s.usize("nx", 32),
                period: s.f64("period", 2.0 * std::f64::consts::PI),
            },
        };
        let unknown = match s.choice("unknown", &["deterministic", "sg"], "deterministic") {
            "deterministic" => UnknownKind::Deterministic,
            _ => UnknownKind::Sg,
        };
        let d = PerturbationSpec::default();
        let shift = s.f64_list("shift", &d.shift);
        let shift_arr = if shift.len() == 3 {
            [shift[0], shift[1], shift[2]]
        } else {
            s.err("shift", "expected three components");
            d.shift
        };
        sim = Some(SimSection {
            mode,
            unknown,
            z: s.f64("z", 0.0),
            scheme: match s.choice("scheme", &["rk4", "exp_euler"], "rk4") {
                "rk4" => TimeScheme::Rk4,
                _ => TimeScheme::ExpEuler,
            },
            form: match s.choice("form", &["additive", "sqrt_weighted"], "additive") {
                "additive" => PerturbationForm::Additive,
                _ => PerturbationForm::SqrtWeighted,
            },
            nonlinear: s.bool("nonlinear", true),
            conservative: s.bool("conservative", true),
            dt: s.f64("dt", 0.05),
            t_end: s.f64("t_end", 10.0),
            output_stride: s.usize("output_stride", 10),
            k_weight: s.f64("k_weight", 0.0),
            init: PerturbationSpec {
                amplitude: s.f64("amplitude", d.amplitude),
                shift: shift_arr,
                width: s.f64("width", d.width),
                z_rate: s.f64("z_rate", d.z_rate),
                x_offset: s.f64("x_offset", d.x_offset),
                x_wavenumber: s.uint("x_wavenumber", d.x_wavenumber as u64) as u32,
                microscopic: s.bool("microscopic", d.microscopic),
            },
        })
    });
    let mut sensitivity = None;
    section("sensitivity", &mut errors, &mut |s| {
        sensitivity = Some(SensitivityConfig {
            r: s.usize("r", 2),
            n: s.usize("n", 1),
            picard_iters: s.usize("picard_iters", 60),
            fd_delta: s.f64("fd_delta", 1e-2),
        })
    });
    let mut linop = None;
    section("linop", &mut errors, &mut |s| {
        linop = Some(LinopConfig {
            delta: s.f64("delta", 0.3),
            beta: s.f64("beta", 0.0),
            probes: s.usize("probes", 200),
            k_max: s.usize("k_max", 8),
            seed: s.uint("seed", 7),
        })
    });
    let mut output = None;
    section("output", &mut errors, &mut |s| {
        output = Some(OutputConfig {
            dir: s.string("dir", "out"),
            field_csv: s.bool("field_csv", false),
        })
    });

    let cfg = RunConfig {
        grid: grid.expect("read"),
        species: species.expect("read"),
        kernel: kernel.expect("read"),
        gpc: gpc.expect("read"),
        sim: sim.expect("read"),
        sensitivity: sensitivity.expect("read"),
        linop: linop.expect("read"),
        output: output.expect("read"),
    };
    errors.extend(cfg.violations());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

fn v(key: &str, message: impl Into<String>) -> Violation {
    Violation {
        key: key.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Every cross-field constraint; no allocation beyond the report.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let g = &self.grid;
        if !(g.dim == 2 || g.dim == 3) {
            out.push(v("grid.dim", "must be 2 or 3"));
        }
        if g.n_per_axis < 4 {
            out.push(v("grid.n_per_axis", "must be at least 4"));
        }
        if !(g.radius > 0.0) {
            out.push(v("grid.radius", "must be positive"));
        }
        if g.angular_resolution < 2 {
            out.push(v("grid.angular_resolution", "must be at least 2"));
        }
        let n = self.species.c_inf.len();
        if n < 2 {
            out.push(v("species.c_inf", "at least two species are required"));
        }
        if self.species.c_inf.iter().any(|c| !(*c > 0.0)) {
            out.push(v("species.c_inf", "equilibrium masses must be positive"));
        }
        let k = &self.kernel;
        if !(0.0..=1.0).contains(&k.gamma) {
            out.push(v("kernel.gamma", "must lie in [0, 1]"));
        }
        if k.c_phi.len() != n || k.c_phi.iter().any(|r| r.len() != n) {
            out.push(v("kernel.c_phi", format!("must be a {n} x {n} matrix")));
        } else {
            if k.c_phi.iter().flatten().any(|c| !(*c > 0.0)) {
                out.push(v("kernel.c_phi", "entries must be positive"));
            }
            if (0..n).any(|i| (0..i).any(|j| k.c_phi[i][j] != k.c_phi[j][i])) {
                out.push(v("kernel.c_phi", "must be symmetric"));
            }
        }
        if let Some(ProfileConfig::Poly { coeffs }) = &k.profile {
            if coeffs.is_empty() {
                out.push(v("kernel.coeffs", "need at least one coefficient"));
            }
        }
        for (key, x) in [("kernel.c_b", k.c_b), ("kernel.c_b1", k.c_b1)] {
            if let Some(x) = x {
                if !(x > 0.0) {
                    out.push(v(key, "must be positive"));
                }
            }
        }
        let s = &self.sensitivity;
        if s.r > MAX_ORDER {
            out.push(v("sensitivity.r", format!("must satisfy r <= {MAX_ORDER}")));
        }
        if s.n > s.r {
            out.push(v("sensitivity.n", "must satisfy n <= r"));
        }
        if k.profile.is_some() && s.r > k.max_order {
            out.push(v("sensitivity.r", "exceeds kernel.max_order"));
        }
        if !(s.fd_delta > 0.0) {
            out.push(v("sensitivity.fd_delta", "must be positive"));
        }
        let p = &self.gpc;
        let c_z = p.measure.c_z();
        if !(c_z > 0.0) {
            out.push(v("gpc.c_z", "must be positive"));
        }
        if let Measure::Beta { alpha, beta, .. } = p.measure {
            if !(alpha > -1.0) || !(beta > -1.0) {
                out.push(v("gpc.alpha", "Beta exponents must exceed -1"));
            }
        }
        if p.k < 1 {
            out.push(v("gpc.k", "K >= 1 is required"));
        }
        if p.k_values.iter().any(|k| *k < 1) || p.k_values.is_empty() {
            out.push(v("gpc.k_values", "need a non-empty list with every K >= 1"));
        }
        if p.q_values.is_empty() {
            out.push(v("gpc.q_values", "need at least one q"));
        }
        if p.k_max < 1 {
            out.push(v("gpc.k_max", "K >= 1 is required"));
        }
        if p.reference_modes <= p.k_max {
            out.push(v("gpc.reference_modes", "must exceed gpc.k_max"));
        }
        if p.probes < 1 {
            out.push(v("gpc.probes", "must be at least 1"));
        }
        let m = &self.sim;
        if !(m.z.abs() <= c_z) {
            out.push(v("sim.z", format!("|z| must lie in the support [-{c_z}, {c_z}]")));
        }
        if !(m.dt > 0.0) {
            out.push(v("sim.dt", "must be positive"));
        }
        if !(m.t_end >= m.dt) {
            out.push(v("sim.t_end", "must be at least dt"));
        }
        if m.output_stride < 1 {
            out.push(v("sim.output_stride", "must be at least 1"));
        }
        if !(m.k_weight >= 0.0) {
            out.push(v("sim.k_weight", "must be non-negative"));
        }
        if !(m.init.width > 0.0) {
            out.push(v("sim.width", "must be positive"));
        }
        if let SpatialMode::Torus1d { nx, period } = m.mode {
            if nx < 8 {
                out.push(v("sim.nx", "must be at least 8"));
            }
            if !(period > 0.0) {
                out.push(v("sim.period", "must be positive"));
            }
        }
        let l = &self.linop;
        if !(l.delta > 0.0 && l.delta < 1.0) {
            out.push(v("linop.delta", "must lie in (0, 1)"));
        }
        if !(l.beta >= 0.0) {
            out.push(v("linop.beta", "must be non-negative"));
        }
        if l.probes < 100 {
            out.push(v("linop.probes", "at least 100 probes are required"));
        }
        if self.output.dir.is_empty() {
            out.push(v("output.dir", "must not be empty"));
        }
        out
    }

    pub fn build_grid(&self) -> kmsuq_core::Result<VelocityGrid> {
        let g = &self.grid;
        VelocityGrid::new(g.dim, g.n_per_axis, g.radius, g.angular_resolution)
    }

    pub fn build_species(&self) -> kmsuq_core::Result<SpeciesSet> {
        SpeciesSet::new(self.species.c_inf.clone())
    }

    pub fn angular_kind(&self) -> AngularKind {
        match &self.kernel.profile {
            None => AngularKind::LinearInZ,
            Some(p) => AngularKind::GeneralSmooth {
                profile: match p {
                    ProfileConfig::Exp { rate } => ZProfile::Exp { rate: *rate },
                    ProfileConfig::Sin { freq, phase } => ZProfile::Sin { freq: *freq, phase: *phase },
                    ProfileConfig::Poly { coeffs } => ZProfile::Poly { coeffs: coeffs.clone() },
                },
                max_order: self.kernel.max_order,
            },
        }
    }

    pub fn build_kernel(&self) -> kmsuq_core::Result<KernelModel> {
        let k = &self.kernel;
        let n = self.species.c_inf.len();
        let mut m = KernelModel::uniform(k.gamma, n, 1.0, self.angular_kind(), k.b0, k.b1)?;
        let c_phi: Vec<f64> = k.c_phi.iter().flatten().copied().collect();
        m = KernelModel::new(k.gamma, c_phi, m.angular.clone(), k.c_b.unwrap_or(m.c_b), k.c_b1.unwrap_or(m.c_b1))?;
        Ok(m)
    }

    pub fn sim_config(&self) -> SimConfig {
        let m = &self.sim;
        SimConfig {
            mode: m.mode,
            unknown: match m.unknown {
                UnknownKind::Deterministic => Unknown::Deterministic { z: m.z },
                UnknownKind::Sg => Unknown::Sg { k: self.gpc.k, q: self.gpc.q },
            },
            scheme: m.scheme,
            form: m.form,
            nonlinear: m.nonlinear,
            conservative: m.conservative,
            dt: m.dt,
            t_end: m.t_end,
            output_stride: m.output_stride,
            k_weight: m.k_weight,
            init: m.init,
            measure: self.gpc.measure,
        }
    }

    /// Canonical TOML text with every key written out; parsing it back gives
    /// an equal configuration and the same text.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let f = |x: f64| format!("{x:?}");
        let fl = |xs: &[f64]| format!("[{}]", xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", "));
        let il = |xs: &[u64]| format!("[{}]", xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "));
        let g = &self.grid;
        let _ = writeln!(
            s,
            "[grid]\ndim = {}\nn_per_axis = {}\nradius = {}\nangular_resolution = {}\n",
            g.dim,
            g.n_per_axis,
            f(g.radius),
            g.angular_resolution
        );
        let _ = writeln!(s, "[species]\nc_inf = {}\n", fl(&self.species.c_inf));
        let k = &self.kernel;
        let _ = writeln!(s, "[kernel]\ngamma = {}", f(k.gamma));
        let _ = writeln!(s, "c_phi = [{}]", k.c_phi.iter().map(|r| fl(r)).collect::<Vec<_>>().join(", "));
        match &k.profile {
            None => {
                let _ = writeln!(s, "kind = \"linear_in_z\"");
            }
            Some(p) => {
                let _ = writeln!(s, "kind = \"general_smooth\"");
                match p {
                    ProfileConfig::Exp { rate } => {
                        let _ = writeln!(s, "profile = \"exp\"\nrate = {}", f(*rate));
                    }
                    ProfileConfig::Sin { freq, phase } => {
                        let _ = writeln!(s, "profile = \"sin\"\nfreq = {}\nphase = {}", f(*freq), f(*phase));
                    }
                    ProfileConfig::Poly { coeffs } => {
                        let _ = writeln!(s, "profile = \"poly\"\ncoeffs = {}", fl(coeffs));
                    }
                }
                let _ = writeln!(s, "max_order = {}", k.max_order);
            }
        }
        let _ = writeln!(s, "b0_a = {}\nb0_c = {}\nb1_a = {}\nb1_c = {}", f(k.b0.a), f(k.b0.c), f(k.b1.a), f(k.b1.c));
        if let Some(c) = k.c_b {
            let _ = writeln!(s, "c_b = {}", f(c));
        }
        if let Some(c) = k.c_b1 {
            let _ = writeln!(s, "c_b1 = {}", f(c));
        }
        s.push('\n');
        let p = &self.gpc;
        match p.measure {
            Measure::Uniform { c_z } => {
                let _ = writeln!(s, "[gpc]\nmeasure = \"uniform\"\nc_z = {}", f(c_z));
            }
            Measure::Beta { alpha, beta, c_z } => {
                let _ = writeln!(s, "[gpc]\nmeasure = \"beta\"\nc_z = {}\nalpha = {}\nbeta = {}", f(c_z), f(alpha), f(beta));
            }
        }
        let ks: Vec<u64> = p.k_values.iter().map(|k| *k as u64).collect();
        let qs: Vec<u64> = p.q_values.iter().map(|q| *q as u64).collect();
        let _ = writeln!(
            s,
            "k = {}\nq = {}\nk_values = {}\nq_values = {}\nprobes = {}\nseed = {}\nk_max = {}\nreference_modes = {}\n",
            p.k,
            p.q,
            il(&ks),
            il(&qs),
            p.probes,
            p.seed,
            p.k_max,
            p.reference_modes
        );
        let m = &self.sim;
        let _ = writeln!(s, "[sim]");
        match m.mode {
            SpatialMode::Homogeneous => {
                let _ = writeln!(s, "mode = \"homogeneous\"");
            }
            SpatialMode::Torus1d { nx, period } => {
                let _ = writeln!(s, "mode = \"torus1d\"\nnx = {nx}\nperiod = {}", f(period));
            }
        }
        let unknown = match m.unknown {
            UnknownKind::Deterministic => "deterministic",
            UnknownKind::Sg => "sg",
        };
        let scheme = match m.scheme {
            TimeScheme::Rk4 => "rk4",
            TimeScheme::ExpEuler => "exp_euler",
        };
        let form = match m.form {
            PerturbationForm::Additive => "additive",
            PerturbationForm::SqrtWeighted => "sqrt_weighted",
        };
        let _ = writeln!(
            s,
            "unknown = \"{unknown}\"\nz = {}\nscheme = \"{scheme}\"\nform = \"{form}\"\nnonlinear = {}\nconservative = {}\ndt = {}\nt_end = {}\noutput_stride = {}\nk_weight = {}",
            f(m.z),
            m.nonlinear,
            m.conservative,
            f(m.dt),
            f(m.t_end),
            m.output_stride,
            f(m.k_weight)
        );
        let i = &m.init;
        let _ = writeln!(
            s,
            "amplitude = {}\nshift = {}\nwidth = {}\nz_rate = {}\nx_offset = {}\nx_wavenumber = {}\nmicroscopic = {}\n",
            f(i.amplitude),
            fl(&i.shift),
            f(i.width),
            f(i.z_rate),
            f(i.x_offset),
            i.x_wavenumber,
            i.microscopic
        );
        let e = &self.sensitivity;
        let _ = writeln!(
            s,
            "[sensitivity]\nr = {}\nn = {}\npicard_iters = {}\nfd_delta = {}\n",
            e.r,
            e.n,
            e.picard_iters,
            f(e.fd_delta)
        );
        let l = &self.linop;
        let _ = writeln!(
            s,
            "[linop]\ndelta = {}\nbeta = {}\nprobes = {}\nk_max = {}\nseed = {}\n",
            f(l.delta),
            f(l.beta),
            l.probes,
            l.k_max,
            l.seed
        );
        let o = &self.output;
        let _ = write!(s, "[output]\ndir = {}\nfield_csv = {}\n", Value::String(o.dir.clone()), o.field_csv);
        s
    }

    /// SHA-256 of the canonical dump, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.dump().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
