//! Problem data: the continuous inputs of the parabolic problem with
//! unknown memory kernel, built-in presets, time grids and measurement
//! series.
//!
//! A problem consists of the source `f(x, y, t, u, p, q)`, the kernel
//! weight `h(x, y, t)`, Neumann flux data `g(x, y, t)` on the boundary,
//! the initial state `u0(x, y)`, the horizon `T` and a user-asserted floor
//! `omega <= |(h(t), 1)|`. Optional exact kernel, measurement, measurement
//! rate and solution expressions make synthetic studies possible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::{ConfigError, Document, Writer};
use crate::expr::{parse, Env, EvalError, Expr, ParseError, Var};
use crate::grid::{GridError, GridFunction, SpatialGrid};

/// Relative slack allowed when checking `|(h, 1)| >= omega` by quadrature.
const OMEGA_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("key `{key}`: {source}")]
    Parse { key: String, source: ParseError },
    #[error("key `{key}` may not depend on `{var}`")]
    Dependency { key: String, var: &'static str },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}` (known: manufactured1d, contaminant, zero)")]
    UnknownPreset(String),
    #[error("omega floor violated at t = {t}: |(h, 1)| = {value:e} < omega = {omega:e}")]
    OmegaFloor { t: f64, value: f64, omega: f64 },
    #[error("evaluating `{what}`: {source}")]
    Eval { what: &'static str, source: EvalError },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("measurement file {path}: {msg}")]
    MeasurementFile { path: PathBuf, msg: String },
    #[error("measurement series: {0}")]
    Measurement(String),
}

impl ProblemError {
    /// Violations of a stated hypothesis (as opposed to malformed input).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ProblemError::Invalid(_) | ProblemError::OmegaFloor { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivativeSource {
    #[default]
    Analytic,
    Discrete,
}

impl std::str::FromStr for DerivativeSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(DerivativeSource::Analytic),
            "discrete" => Ok(DerivativeSource::Discrete),
            _ => Err(format!("expected `analytic` or `discrete`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for DerivativeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DerivativeSource::Analytic => "analytic",
            DerivativeSource::Discrete => "discrete",
        })
    }
}

/// `(0, lx)` or `(0, lx) x (0, ly)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub lx: f64,
    pub ly: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    pub f: Expr,
    pub h: Expr,
    pub g: Expr,
    pub u0: Expr,
    pub domain: Domain,
    pub horizon: f64,
    pub omega: f64,
    pub kernel_exact: Option<Expr>,
    pub measurement_exact: Option<Expr>,
    pub measurement_rate_exact: Option<Expr>,
    pub solution_exact: Option<Expr>,
    /// Recorded user assertion that `f` is bounded; not checked.
    pub assume_f_bounded: bool,
    pub measurement_file: Option<PathBuf>,
}

/// Uniform partition `t_i = i * tau`, `tau = T / n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    tau: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ProblemError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ProblemError::Invalid(format!("T must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(ProblemError::Invalid("n must be at least 1".into()));
        }
        Ok(TimeGrid {
            horizon,
            steps,
            tau: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.tau
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|i| self.t(i))
    }
}

/// Measured `m_0..m_n` and rates `m'_1..m'_n` (plus `m'_0` when known).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    values: Vec<f64>,
    rates: Vec<f64>,
    initial_rate: Option<f64>,
    provenance: DerivativeSource,
}

impl MeasurementSeries {
    pub fn new(
        values: Vec<f64>,
        rates: Vec<f64>,
        initial_rate: Option<f64>,
        provenance: DerivativeSource,
    ) -> Result<Self, ProblemError> {
        if values.len() < 2 || rates.len() + 1 != values.len() {
            return Err(ProblemError::Measurement(format!(
                "{} samples and {} rates do not describe n >= 1 steps",
                values.len(),
                rates.len()
            )));
        }
        let finite = values.iter().chain(&rates).chain(initial_rate.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(ProblemError::Measurement("non-finite entry".into()));
        }
        Ok(MeasurementSeries {
            values,
            rates,
            initial_rate,
            provenance,
        })
    }

    /// Samples with backward-difference rates `(m_i - m_{i-1}) / tau`.
    pub fn from_samples(values: Vec<f64>, tau: f64) -> Result<Self, ProblemError> {
        let rates = values.windows(2).map(|w| (w[1] - w[0]) / tau).collect();
        Self::new(values, rates, None, DerivativeSource::Discrete)
    }

    pub fn from_expressions(m: &Expr, rate: &Expr, tg: &TimeGrid) -> Result<Self, ProblemError> {
        let at = |e: &Expr, t: f64, what| {
            e.eval(&Env::new().with(Var::T, t))
                .map_err(|source| ProblemError::Eval { what, source })
        };
        let values = tg.nodes().map(|t| at(m, t, "m")).collect::<Result<Vec<_>, _>>()?;
        let rates = (1..=tg.steps())
            .map(|i| at(rate, tg.t(i), "m_prime"))
            .collect::<Result<Vec<_>, _>>()?;
        let initial = at(rate, 0.0, "m_prime")?;
        Self::new(values, rates, Some(initial), DerivativeSource::Analytic)
    }

    /// Replace the rates by an analytic expression.
    pub fn with_analytic_rates(self, rate: &Expr, tg: &TimeGrid) -> Result<Self, ProblemError> {
        let at = |t: f64| {
            rate.eval(&Env::new().with(Var::T, t))
                .map_err(|source| ProblemError::Eval { what: "m_prime", source })
        };
        let rates = (1..=tg.steps()).map(|i| at(tg.t(i))).collect::<Result<Vec<_>, _>>()?;
        Self::new(self.values, rates, Some(at(0.0)?), DerivativeSource::Analytic)
    }

    pub fn steps(&self) -> usize {
        self.rates.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn m0(&self) -> f64 {
        self.values[0]
    }

    /// `m'_i` for `1 <= i <= n`.
    pub fn rate(&self, i: usize) -> f64 {
        self.rates[i - 1]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn initial_rate(&self) -> Option<f64> {
        self.initial_rate
    }

    pub fn provenance(&self) -> DerivativeSource {
        self.provenance
    }

    /// Keep every `factor`-th sample. Rates are re-derived by backward
    /// differences on the coarse grid unless they are analytic, in which
    /// case they are subsampled.
    pub fn subsample(&self, coarse_steps: usize, coarse_tau: f64) -> Result<Self, ProblemError> {
        let n = self.steps();
        if coarse_steps == 0 || !n.is_multiple_of(coarse_steps) {
            return Err(ProblemError::Measurement(format!(
                "cannot resample {n} steps onto {coarse_steps} steps"
            )));
        }
        let factor = n / coarse_steps;
        let values: Vec<f64> = self.values.iter().step_by(factor).copied().collect();
        match self.provenance {
            DerivativeSource::Discrete => Self::from_samples(values, coarse_tau),
            DerivativeSource::Analytic => {
                let rates = (1..=coarse_steps).map(|i| self.rate(i * factor)).collect();
                Self::new(values, rates, self.initial_rate, DerivativeSource::Analytic)
            }
        }
    }

    /// Add i.i.d. `N(0, sigma^2)` noise to every sample and recompute rates
    /// by backward differences.
    pub fn with_noise(&self, sigma: f64, tau: f64, rng: &mut impl Rng) -> Result<Self, ProblemError> {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| ProblemError::Measurement(format!("noise level {sigma}: {e}")))?;
        let values = self.values.iter().map(|m| m + normal.sample(rng)).collect();
        Self::from_samples(values, tau)
    }

    /// Read a `t,M,m_prime` CSV (as written by the forward mode). Rows must
    /// sit on a uniform grid whose step count is a multiple of `tg.steps()`.
    pub fn read_csv(path: &Path, tg: &TimeGrid) -> Result<Self, ProblemError> {
        let err = |msg: String| ProblemError::MeasurementFile {
            path: path.to_path_buf(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut rows: Vec<(f64, f64, Option<f64>)> = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if k == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() < 2 {
                return Err(err(format!("line {}: expected at least t,M", k + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("line {}: bad number `{s}`", k + 1)))
            };
            let rate = match cols.get(2) {
                Some(s) if !s.is_empty() => Some(num(s)?),
                _ => None,
            };
            rows.push((num(cols[0])?, num(cols[1])?, rate));
        }
        if rows.len() < 2 {
            return Err(err("need at least two samples".into()));
        }
        let file_steps = rows.len() - 1;
        let file_tau = tg.horizon() / file_steps as f64;
        for (i, (t, _, _)) in rows.iter().enumerate() {
            if (t - i as f64 * file_tau).abs() > 1e-9 * tg.horizon() {
                return Err(err(format!(
                    "sample {i} at t = {t} is off the uniform grid on [0, {}]",
                    tg.horizon()
                )));
            }
        }
        let values: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let fine = if rows[1..].iter().all(|r| r.2.is_some()) {
            let rates = rows[1..].iter().map(|r| r.2.unwrap_or_default()).collect();
            Self::new(values, rates, rows[0].2, DerivativeSource::Discrete)?
        } else {
            Self::from_samples(values, file_tau)?
        };
        if file_steps == tg.steps() {
            Ok(fine)
        } else {
            fine.subsample(tg.steps(), tg.tau())
        }
    }
}

/// Physical parameters of the reactive-transport preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContaminantParams {
    pub bulk_density: f64,
    pub porosity: f64,
    pub desorption_rate: f64,
    pub distribution_coeff: f64,
    pub sorbed_initial: f64,
    pub velocity: [f64; 2],
}

impl Default for ContaminantParams {
    fn default() -> Self {
        ContaminantParams {
            bulk_density: 1.0,
            porosity: 1.0,
            desorption_rate: 1.0,
            distribution_coeff: 1.0,
            sorbed_initial: 1.0,
            velocity: [0.0, 0.0],
        }
    }
}

fn expr(src: &str) -> Expr {
    parse(src).unwrap_or_else(|e| panic!("built-in expression `{src}`: {e}"))
}

/// `u*(x,t) = (1+t)(1+cos(pi x))`, `K*(t) = exp(-t)` on `(0,1) x (0,1)`.
pub fn preset_manufactured_1d() -> ProblemSpec {
    ProblemSpec {
        name: "manufactured1d".into(),
        f: expr("(1 + cos(pi*x)) + (1 + t)*pi^2*cos(pi*x) + exp(-t) + t*(1 + cos(pi*x))"),
        h: expr("1"),
        g: expr("0"),
        u0: expr("1 + cos(pi*x)"),
        domain: Domain { lx: 1.0, ly: None },
        horizon: 1.0,
        omega: 1.0,
        kernel_exact: Some(expr("exp(-t)")),
        measurement_exact: Some(expr("1 + t")),
        measurement_rate_exact: Some(expr("1")),
        solution_exact: Some(expr("(1 + t)*(1 + cos(pi*x))")),
        assume_f_bounded: true,
        measurement_file: None,
    }
}

/// Sorption kinetics: `K(t) = -(rho_b/n) K_r^2 K_d exp(-K_r t)`,
/// `h = -S_0/(K_r K_d)`, `f(u, r) = -(rho_b/n) K_r K_d u - V.r`.
pub fn preset_contaminant(p: &ContaminantParams) -> Result<ProblemSpec, ProblemError> {
    if !(p.desorption_rate > 0.0) {
        return Err(ProblemError::Invalid(format!(
            "K_r must be positive, got {}",
            p.desorption_rate
        )));
    }
    if p.distribution_coeff == 0.0 {
        return Err(ProblemError::Invalid("K_d must be nonzero".into()));
    }
    if p.porosity == 0.0 {
        return Err(ProblemError::Invalid("porosity must be nonzero".into()));
    }
    let ratio = p.bulk_density / p.porosity;
    let kr = p.desorption_rate;
    let kd = p.distribution_coeff;
    let k0 = -ratio * kr * kr * kd;
    let h = -p.sorbed_initial / (kr * kd);
    if h == 0.0 {
        return Err(ProblemError::Invalid("S_0 = 0 makes (h, 1) vanish".into()));
    }
    let reaction = -ratio * kr * kd;
    let [vx, _] = p.velocity;
    Ok(ProblemSpec {
        name: "contaminant".into(),
        f: expr(&format!("({reaction:?})*u - ({vx:?})*p")),
        h: expr(&format!("({h:?})")),
        g: expr("0"),
        u0: expr("1 + 0.5*cos(pi*x)"),
        domain: Domain { lx: 1.0, ly: None },
        horizon: 1.0,
        omega: h.abs(),
        kernel_exact: Some(expr(&format!("({k0:?})*exp(-({kr:?})*t)"))),
        measurement_exact: None,
        measurement_rate_exact: None,
        solution_exact: None,
        assume_f_bounded: false,
        measurement_file: None,
    })
}

/// Everything zero except `h = 1`.
pub fn preset_zero() -> ProblemSpec {
    ProblemSpec {
        name: "zero".into(),
        f: expr("0"),
        h: expr("1"),
        g: expr("0"),
        u0: expr("0"),
        domain: Domain { lx: 1.0, ly: None },
        horizon: 1.0,
        omega: 1.0,
        kernel_exact: Some(expr("0")),
        measurement_exact: Some(expr("0")),
        measurement_rate_exact: Some(expr("0")),
        solution_exact: Some(expr("0")),
        assume_f_bounded: true,
        measurement_file: None,
    }
}

pub fn preset(name: &str) -> Result<ProblemSpec, ProblemError> {
    match name {
        "manufactured1d" => Ok(preset_manufactured_1d()),
        "contaminant" => preset_contaminant(&ContaminantParams::default()),
        "zero" => Ok(preset_zero()),
        other => Err(ProblemError::UnknownPreset(other.to_string())),
    }
}

/// Discretization parameters read alongside a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub n: usize,
    pub mx: usize,
    pub my: Option<usize>,
    pub derivative: Option<DerivativeSource>,
}

impl Default for Discretization {
    fn default() -> Self {
        Discretization {
            n: 100,
            mx: 100,
            my: None,
            derivative: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProblem {
    pub spec: ProblemSpec,
    pub discretization: Discretization,
}

const PROBLEM_KEYS: &[&str] = &[
    "name",
    "preset",
    "f",
    "h",
    "g",
    "u0",
    "Lx",
    "Ly",
    "T",
    "omega",
    "K_exact",
    "m",
    "m_prime",
    "u_exact",
    "assume_f_bounded",
    "measurement_file",
    "rho_b",
    "porosity",
    "K_r",
    "K_d",
    "S_0",
    "V",
    "V_y",
];
const CONTAMINANT_KEYS: &[&str] = &["rho_b", "porosity", "K_r", "K_d", "S_0", "V", "V_y"];
pub(crate) const DISCRETIZATION_KEYS: &[&str] = &["n", "mx", "my", "derivative"];

/// Build a problem from the `[problem]` and `[discretization]` sections.
pub fn load_problem(config: &str) -> Result<LoadedProblem, ProblemError> {
    let doc = Document::parse(config)?;
    load_from_document(&doc)
}

pub fn load_from_document(doc: &Document) -> Result<LoadedProblem, ProblemError> {
    const S: &str = "problem";
    doc.check_keys(S, PROBLEM_KEYS)?;
    doc.check_keys("discretization", DISCRETIZATION_KEYS)?;

    let preset_name = doc.get_str(S, "preset");
    let mut spec = match preset_name {
        Some("contaminant") => {
            let d = ContaminantParams::default();
            let get = |k: &str, default: f64| doc.get_f64(S, k).map(|v| v.unwrap_or(default));
            let params = ContaminantParams {
                bulk_density: get("rho_b", d.bulk_density)?,
                porosity: get("porosity", d.porosity)?,
                desorption_rate: get("K_r", d.desorption_rate)?,
                distribution_coeff: get("K_d", d.distribution_coeff)?,
                sorbed_initial: get("S_0", d.sorbed_initial)?,
                velocity: [get("V", d.velocity[0])?, get("V_y", d.velocity[1])?],
            };
            preset_contaminant(&params)?
        }
        Some(name) => {
            reject_contaminant_keys(doc)?;
            preset(name)?
        }
        None => {
            reject_contaminant_keys(doc)?;
            let mut missing = None;
            for key in ["f", "h", "g", "u0", "T", "omega"] {
                if doc.get(S, key).is_none() {
                    missing = Some(key);
                    break;
                }
            }
            if let Some(key) = missing {
                return Err(ConfigError::Missing {
                    section: S.into(),
                    key: key.into(),
                }
                .into());
            }
            ProblemSpec {
                name: "custom".into(),
                f: expr("0"),
                h: expr("1"),
                g: expr("0"),
                u0: expr("0"),
                domain: Domain { lx: 1.0, ly: None },
                horizon: 1.0,
                omega: 1.0,
                kernel_exact: None,
                measurement_exact: None,
                measurement_rate_exact: None,
                solution_exact: None,
                assume_f_bounded: false,
                measurement_file: None,
            }
        }
    };

    let parse_key = |key: &str| -> Result<Option<Expr>, ProblemError> {
        doc.get_str(S, key)
            .map(|src| {
                parse(src).map_err(|source| ProblemError::Parse {
                    key: key.to_string(),
                    source,
                })
            })
            .transpose()
    };
    if let Some(name) = doc.get_str(S, "name") {
        spec.name = name.to_string();
    }
    if let Some(e) = parse_key("f")? {
        spec.f = e;
    }
    if let Some(e) = parse_key("h")? {
        spec.h = e;
    }
    if let Some(e) = parse_key("g")? {
        spec.g = e;
    }
    if let Some(e) = parse_key("u0")? {
        spec.u0 = e;
    }
    for (key, slot) in [
        ("K_exact", &mut spec.kernel_exact),
        ("m", &mut spec.measurement_exact),
        ("m_prime", &mut spec.measurement_rate_exact),
        ("u_exact", &mut spec.solution_exact),
    ] {
        if let Some(e) = parse_key(key)? {
            *slot = Some(e);
        }
    }
    if let Some(v) = doc.get_f64(S, "Lx")? {
        spec.domain.lx = v;
    }
    if let Some(v) = doc.get_f64(S, "Ly")? {
        spec.domain.ly = Some(v);
    }
    if let Some(v) = doc.get_f64(S, "T")? {
        spec.horizon = v;
    }
    if let Some(v) = doc.get_f64(S, "omega")? {
        spec.omega = v;
    }
    if let Some(v) = doc.get_bool(S, "assume_f_bounded")? {
        spec.assume_f_bounded = v;
    }
    if let Some(p) = doc.get_str(S, "measurement_file") {
        spec.measurement_file = Some(PathBuf::from(p));
    }
    spec.validate()?;

    const D: &str = "discretization";
    let defaults = Discretization::default();
    let derivative = doc
        .get_str(D, "derivative")
        .map(|s| {
            s.parse::<DerivativeSource>().map_err(|_| ConfigError::BadValue {
                section: D.into(),
                key: "derivative".into(),
                value: s.into(),
                expected: "analytic or discrete",
            })
        })
        .transpose()?;
    let discretization = Discretization {
        n: doc.get_usize(D, "n")?.unwrap_or(defaults.n),
        mx: doc.get_usize(D, "mx")?.unwrap_or(defaults.mx),
        my: doc.get_usize(D, "my")?,
        derivative,
    };
    if discretization.n == 0 || discretization.mx == 0 || discretization.my == Some(0) {
        return Err(ProblemError::Invalid("n, mx and my must be positive".into()));
    }
    Ok(LoadedProblem {
        spec,
        discretization,
    })
}

fn reject_contaminant_keys(doc: &Document) -> Result<(), ProblemError> {
    for key in CONTAMINANT_KEYS {
        if doc.get("problem", key).is_some() {
            return Err(ProblemError::Invalid(format!(
                "`{key}` only applies to preset \"contaminant\""
            )));
        }
    }
    Ok(())
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        if self.domain.ly.is_some() {
            2
        } else {
            1
        }
    }

    /// Structural checks: positive horizon, floor and extents; expressions
    /// only use the variables they may depend on.
    pub fn validate(&self) -> Result<(), ProblemError> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ProblemError::Invalid(format!("{what} must be positive, got {v}")))
            }
        };
        positive(self.horizon, "T")?;
        positive(self.omega, "omega")?;
        positive(self.domain.lx, "Lx")?;
        if let Some(ly) = self.domain.ly {
            positive(ly, "Ly")?;
        }
        let forbid = |key: &str, e: &Expr, vars: &[Var]| {
            for v in vars {
                if e.mentions(*v) {
                    return Err(ProblemError::Dependency {
                        key: key.to_string(),
                        var: v.name(),
                    });
                }
            }
            Ok(())
        };
        let state = [Var::U, Var::P, Var::Q];
        forbid("h", &self.h, &state)?;
        forbid("g", &self.g, &state)?;
        forbid("u0", &self.u0, &[Var::T, Var::U, Var::P, Var::Q])?;
        let time_only = [Var::X, Var::Y, Var::U, Var::P, Var::Q];
        for (key, e) in [
            ("K_exact", &self.kernel_exact),
            ("m", &self.measurement_exact),
            ("m_prime", &self.measurement_rate_exact),
        ] {
            if let Some(e) = e {
                forbid(key, e, &time_only)?;
            }
        }
        if let Some(e) = &self.solution_exact {
            forbid("u_exact", e, &state)?;
        }
        if self.dim() == 1 {
            for (key, e) in [("f", &self.f), ("h", &self.h), ("g", &self.g), ("u0", &self.u0)] {
                if e.mentions(Var::Y) || (key == "f" && e.mentions(Var::Q)) {
                    return Err(ProblemError::Invalid(format!(
                        "`{key}` uses a second space dimension but Ly is not set"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self, mx: usize, my: Option<usize>) -> Result<Arc<SpatialGrid>, ProblemError> {
        Ok(match self.domain.ly {
            None => SpatialGrid::interval(self.domain.lx, mx)?,
            Some(ly) => SpatialGrid::rectangle(self.domain.lx, ly, mx, my.unwrap_or(mx))?,
        })
    }

    /// `(h(t), 1)` by the grid quadrature.
    pub fn h_mass(&self, grid: &Arc<SpatialGrid>, t: f64) -> Result<f64, ProblemError> {
        Ok(self.h_field(grid, t)?.integral())
    }

    /// Discrete check of `|(h(t_i), 1)| >= omega` at every time node.
    pub fn check_omega_floor(&self, grid: &Arc<SpatialGrid>, tg: &TimeGrid) -> Result<(), ProblemError> {
        for t in tg.nodes() {
            let value = self.h_mass(grid, t)?;
            if value.abs() < self.omega * (1.0 - OMEGA_SLACK) {
                return Err(ProblemError::OmegaFloor {
                    t,
                    value: value.abs(),
                    omega: self.omega,
                });
            }
        }
        Ok(())
    }

    pub fn initial_field(&self, grid: &Arc<SpatialGrid>) -> Result<GridFunction, ProblemError> {
        sample(&self.u0, "u0", grid, 0.0)
    }

    pub fn h_field(&self, grid: &Arc<SpatialGrid>, t: f64) -> Result<GridFunction, ProblemError> {
        sample(&self.h, "h", grid, t)
    }

    pub fn exact_field(&self, grid: &Arc<SpatialGrid>, t: f64) -> Option<Result<GridFunction, ProblemError>> {
        self.solution_exact.as_ref().map(|e| sample(e, "u_exact", grid, t))
    }

    /// `g(t)` at the boundary nodes, ordered like [`SpatialGrid::boundary_nodes`].
    pub fn boundary_values(&self, grid: &Arc<SpatialGrid>, t: f64) -> Result<Vec<f64>, ProblemError> {
        grid.boundary_nodes()
            .iter()
            .map(|&j| {
                let (x, y) = grid.coord(j);
                self.g
                    .eval(&Env::new().with(Var::X, x).with(Var::Y, y).with(Var::T, t))
                    .map_err(|source| ProblemError::Eval { what: "g", source })
            })
            .collect()
    }

    /// `f(x, t, u, grad u)` at every node.
    pub fn source_field(&self, t: f64, u: &GridFunction) -> Result<GridFunction, ProblemError> {
        let grid = u.grid();
        let needs_gradient = self.f.mentions(Var::P) || self.f.mentions(Var::Q);
        let grad = if needs_gradient { u.nodal_gradient() } else { Vec::new() };
        let values = (0..grid.node_count())
            .map(|j| {
                let (x, y) = grid.coord(j);
                let mut env = Env::new()
                    .with(Var::X, x)
                    .with(Var::Y, y)
                    .with(Var::T, t)
                    .with(Var::U, u.values()[j]);
                if let Some(p) = grad.first() {
                    env.set(Var::P, p.values()[j]);
                }
                env.set(Var::Q, grad.get(1).map_or(0.0, |q| q.values()[j]));
                self.f
                    .eval(&env)
                    .map_err(|source| ProblemError::Eval { what: "f", source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GridFunction::new(grid.clone(), values)?)
    }

    pub fn kernel_at(&self, t: f64) -> Option<Result<f64, ProblemError>> {
        self.kernel_exact.as_ref().map(|k| {
            k.eval(&Env::new().with(Var::T, t))
                .map_err(|source| ProblemError::Eval { what: "K_exact", source })
        })
    }

    /// Analytic measurement series, when both `m` and `m_prime` are given.
    pub fn analytic_measurement(&self, tg: &TimeGrid) -> Option<Result<MeasurementSeries, ProblemError>> {
        match (&self.measurement_exact, &self.measurement_rate_exact) {
            (Some(m), Some(r)) => Some(MeasurementSeries::from_expressions(m, r, tg)),
            _ => None,
        }
    }

    /// Config text that [`load_problem`] turns back into an equal spec.
    pub fn to_config(&self, disc: Option<&Discretization>) -> String {
        let mut w = Writer::default();
        w.section("problem")
            .quoted("name", &self.name)
            .quoted("f", &self.f)
            .quoted("h", &self.h)
            .quoted("g", &self.g)
            .quoted("u0", &self.u0)
            .bare("Lx", format!("{:?}", self.domain.lx));
        if let Some(ly) = self.domain.ly {
            w.bare("Ly", format!("{ly:?}"));
        }
        w.bare("T", format!("{:?}", self.horizon))
            .bare("omega", format!("{:?}", self.omega));
        for (key, e) in [
            ("K_exact", &self.kernel_exact),
            ("m", &self.measurement_exact),
            ("m_prime", &self.measurement_rate_exact),
            ("u_exact", &self.solution_exact),
        ] {
            if let Some(e) = e {
                w.quoted(key, e);
            }
        }
        w.bare("assume_f_bounded", self.assume_f_bounded);
        if let Some(p) = &self.measurement_file {
            w.quoted("measurement_file", p.display());
        }
        if let Some(d) = disc {
            w.section("discretization").bare("n", d.n).bare("mx", d.mx);
            if let Some(my) = d.my {
                w.bare("my", my);
            }
            if let Some(src) = d.derivative {
                w.quoted("derivative", src);
            }
        }
        w.finish()
    }
}

fn sample(e: &Expr, what: &'static str, grid: &Arc<SpatialGrid>, t: f64) -> Result<GridFunction, ProblemError> {
    let gf = GridFunction::sample(grid.clone(), |x, y| {
        e.eval(&Env::new().with(Var::X, x).with(Var::Y, y).with(Var::T, t))
            .map_err(|source| ProblemError::Eval { what, source })
    })?;
    Ok(GridFunction::new(grid.clone(), gf.into_values())?)
}

/// `t,M,m_prime` CSV text for a measurement series.
pub fn measurement_csv(series: &MeasurementSeries, tg: &TimeGrid) -> String {
    let mut out = String::from("t,M,m_prime\n");
    for i in 0..=series.steps() {
        let rate = if i == 0 {
            series.initial_rate().map(crate::fmt17).unwrap_or_default()
        } else {
            crate::fmt17(series.rate(i))
        };
        let _ = writeln!(out, "{},{},{}", crate::fmt17(tg.t(i)), crate::fmt17(series.value(i)), rate);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    /// Independent pointwise residual of the PDE
    /// `u_t - Δu + K h + K*u - f(x,t,u,u_x)` by finite differences in x and
    /// t and composite Simpson quadrature of the memory term.
    fn pde_residual_1d(spec: &ProblemSpec, x: f64, t: f64) -> f64 {
        let u = spec.solution_exact.as_ref().unwrap();
        let k = spec.kernel_exact.as_ref().unwrap();
        let ue = |x: f64, t: f64| u.eval(&Env::new().with(Var::X, x).with(Var::T, t)).unwrap();
        let ke = |t: f64| k.eval(&Env::new().with(Var::T, t)).unwrap();
        let d = 1e-3;
        // fourth-order central stencils
        let ut = (-ue(x, t + 2.0 * d) + 8.0 * ue(x, t + d) - 8.0 * ue(x, t - d) + ue(x, t - 2.0 * d))
            / (12.0 * d);
        let ux = (-ue(x + 2.0 * d, t) + 8.0 * ue(x + d, t) - 8.0 * ue(x - d, t) + ue(x - 2.0 * d, t))
            / (12.0 * d);
        let uxx = (-ue(x + 2.0 * d, t) + 16.0 * ue(x + d, t) - 30.0 * ue(x, t) + 16.0 * ue(x - d, t)
            - ue(x - 2.0 * d, t))
            / (12.0 * d * d);
        let n = 2000;
        let hs = t / n as f64;
        let mut conv = 0.0;
        for j in 0..=n {
            let s = j as f64 * hs;
            let w = if j == 0 || j == n { 1.0 } else if j % 2 == 1 { 4.0 } else { 2.0 };
            conv += w * ke(t - s) * ue(x, s);
        }
        conv *= hs / 3.0;
        let env = Env::new().with(Var::X, x).with(Var::T, t);
        let h = spec.h.eval(&env).unwrap();
        let f = spec
            .f
            .eval(&env.with(Var::U, ue(x, t)).with(Var::P, ux).with(Var::Q, 0.0))
            .unwrap();
        ut - uxx + ke(t) * h + conv - f
    }

    #[test]
    fn manufactured_preset_satisfies_pde() {
        let spec = preset_manufactured_1d();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = rng.gen_range(0.05..0.95);
            let t = rng.gen_range(0.05..0.95);
            let r = pde_residual_1d(&spec, x, t);
            assert!(r.abs() < 1e-6, "residual {r} at ({x}, {t})");
        }
    }

    #[test]
    fn manufactured_memory_term_closed_form() {
        // ∫_0^t e^{-(t-s)} (1+s) ds = t
        for t in [0.1, 0.5, 1.0] {
            let n = 2000;
            let hs = t / n as f64;
            let mut acc = 0.0;
            for j in 0..=n {
                let s = j as f64 * hs;
                let w = if j == 0 || j == n { 1.0 } else if j % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * (-(t - s)).exp() * (1.0 + s);
            }
            assert!((acc * hs / 3.0 - t).abs() < 1e-10);
        }
    }

    #[test]
    fn manufactured_measurement_and_flux() {
        let spec = preset_manufactured_1d();
        let u = spec.solution_exact.as_ref().unwrap();
        let m = spec.measurement_exact.as_ref().unwrap();
        for t in [0.0, 0.3, 1.0] {
            // Simpson in x of u*(·, t)
            let n = 200;
            let hx = 1.0 / n as f64;
            let mut acc = 0.0;
            for j in 0..=n {
                let w = if j == 0 || j == n { 1.0 } else if j % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * u.eval(&Env::new().with(Var::X, j as f64 * hx).with(Var::T, t)).unwrap();
            }
            let mt = m.eval(&Env::new().with(Var::T, t)).unwrap();
            assert!((acc * hx / 3.0 - mt).abs() < 1e-9);
            // zero Neumann flux: u_x = -(1+t) pi sin(pi x) vanishes at 0 and 1
            assert!(((1.0 + t) * PI * (PI * 1.0).sin()).abs() < 1e-12);
        }
        assert_eq!(m.eval(&Env::new().with(Var::T, 0.0)).unwrap(), 1.0);
        let g = SpatialGrid::interval(1.0, 10).unwrap();
        assert!((spec.h_mass(&g, 0.3).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn contaminant_defaults() {
        let spec = preset("contaminant").unwrap();
        let env = Env::new().with(Var::T, 0.7);
        assert!((spec.kernel_at(0.7).unwrap().unwrap() + (-0.7f64).exp()).abs() < 1e-15);
        assert_eq!(spec.h.eval(&env).unwrap(), -1.0);
        let f = |u: f64, p: f64| spec.f.eval(&env.with(Var::X, 0.1).with(Var::U, u).with(Var::P, p)).unwrap();
        assert_eq!(f(2.0, 5.0), -2.0);
        let g = SpatialGrid::interval(1.0, 100).unwrap();
        let mass = spec.h_mass(&g, 0.0).unwrap();
        assert!((mass + 1.0).abs() < 1e-14);
        spec.check_omega_floor(&g, &TimeGrid::new(1.0, 10).unwrap()).unwrap();
    }

    #[test]
    fn contaminant_parameters() {
        let p = ContaminantParams {
            bulk_density: 2.0,
            porosity: 0.5,
            desorption_rate: 3.0,
            distribution_coeff: 0.25,
            sorbed_initial: 1.5,
            velocity: [0.2, 0.0],
        };
        let spec = preset_contaminant(&p).unwrap();
        // K(0) = -(rho_b/n) K_r^2 K_d = -4 * 9 * 0.25
        assert!((spec.kernel_at(0.0).unwrap().unwrap() + 9.0).abs() < 1e-12);
        assert!((spec.h.eval(&Env::new()).unwrap() + 2.0).abs() < 1e-12);
        let env = Env::new().with(Var::X, 0.0).with(Var::T, 0.0).with(Var::U, 1.0).with(Var::P, 1.0);
        assert!((spec.f.eval(&env).unwrap() - (-3.0 - 0.2)).abs() < 1e-12);
        for bad in [
            ContaminantParams { desorption_rate: 0.0, ..p },
            ContaminantParams { desorption_rate: -1.0, ..p },
            ContaminantParams { distribution_coeff: 0.0, ..p },
        ] {
            assert!(matches!(preset_contaminant(&bad), Err(ProblemError::Invalid(_))));
        }
    }

    #[test]
    fn load_preset_matches_fixture() {
        let loaded = load_problem("[problem]\npreset = \"manufactured1d\"\n").unwrap();
        assert_eq!(loaded.spec, preset_manufactured_1d());
        assert_eq!(loaded.discretization, Discretization::default());
    }

    #[test]
    fn load_rejects_bad_configs() {
        let bad_t = "[problem]\npreset = \"manufactured1d\"\nT = -1\n";
        assert!(load_problem(bad_t).unwrap_err().is_validation());
        let missing = "[problem]\nf = \"0\"\nh = \"1\"\ng = \"0\"\nu0 = \"0\"\nT = 1\n";
        assert!(matches!(
            load_problem(missing),
            Err(ProblemError::Config(ConfigError::Missing { .. }))
        ));
        let bad_expr = "[problem]\npreset = \"zero\"\nf = \"sin(\"\n";
        match load_problem(bad_expr) {
            Err(ProblemError::Parse { key, .. }) => assert_eq!(key, "f"),
            other => panic!("{other:?}"),
        }
        let dep = "[problem]\npreset = \"zero\"\nh = \"u\"\n";
        assert!(matches!(load_problem(dep), Err(ProblemError::Dependency { .. })));
        let stray = "[problem]\npreset = \"zero\"\nK_r = 2\n";
        assert!(load_problem(stray).is_err());
        assert!(matches!(
            load_problem("[problem]\npreset = \"nope\"\n"),
            Err(ProblemError::UnknownPreset(_))
        ));
    }

    #[test]
    fn omega_floor_violation_for_vanishing_h() {
        let loaded = load_problem("[problem]\npreset = \"zero\"\nh = \"0\"\n").unwrap();
        let g = loaded.spec.grid(10, None).unwrap();
        let err = loaded
            .spec
            .check_omega_floor(&g, &TimeGrid::new(1.0, 4).unwrap())
            .unwrap_err();
        assert!(matches!(err, ProblemError::OmegaFloor { .. }));
        assert!(err.is_validation());
    }

    #[test]
    fn config_roundtrip_reproduces_spec() {
        let disc = Discretization {
            n: 40,
            mx: 30,
            my: Some(20),
            derivative: Some(DerivativeSource::Discrete),
        };
        let mut two_d = preset_zero();
        two_d.domain.ly = Some(0.5);
        two_d.h = expr("1 + 0.1*y*x");
        for spec in [preset_manufactured_1d(), preset("contaminant").unwrap(), two_d] {
            let text = spec.to_config(Some(&disc));
            let back = load_problem(&text).unwrap();
            assert_eq!(back.spec, spec, "{text}");
            assert_eq!(back.discretization, disc);
        }
    }

    #[test]
    fn time_grid_basics() {
        let tg = TimeGrid::new(1.0, 100).unwrap();
        assert_eq!(tg.tau(), 1.0 / 100.0);
        assert_eq!(tg.nodes().count(), 101);
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn measurement_series_resampling() {
        let fine = TimeGrid::new(1.0, 100).unwrap();
        let values: Vec<f64> = fine.nodes().map(|t| t * t).collect();
        let s = MeasurementSeries::from_samples(values, fine.tau()).unwrap();
        assert_eq!(s.provenance(), DerivativeSource::Discrete);
        assert!((s.rate(1) - 0.01).abs() < 1e-12);
        let coarse = s.subsample(25, 0.04).unwrap();
        assert_eq!(coarse.steps(), 25);
        assert_eq!(coarse.value(1), s.value(4));
        assert!((coarse.rate(1) - 0.04).abs() < 1e-12);
        assert!(s.subsample(33, 1.0 / 33.0).is_err());
    }

    #[test]
    fn analytic_series_and_noise() {
        let spec = preset_manufactured_1d();
        let tg = TimeGrid::new(1.0, 10).unwrap();
        let s = spec.analytic_measurement(&tg).unwrap().unwrap();
        assert_eq!(s.provenance(), DerivativeSource::Analytic);
        assert_eq!(s.initial_rate(), Some(1.0));
        assert!((s.value(10) - 2.0).abs() < 1e-15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noisy = s.with_noise(1e-3, tg.tau(), &mut rng).unwrap();
        assert_eq!(noisy.provenance(), DerivativeSource::Discrete);
        let dev = noisy
            .values()
            .iter()
            .zip(s.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev > 0.0 && dev < 1e-2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert_eq!(noisy, s.with_noise(1e-3, tg.tau(), &mut rng).unwrap());
    }

    #[test]
    fn measurement_csv_roundtrip() {
        let tg = TimeGrid::new(2.0, 8).unwrap();
        let values: Vec<f64> = tg.nodes().map(|t| (0.3 * t).sin() + 1.0).collect();
        let s = MeasurementSeries::from_samples(values, tg.tau()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, measurement_csv(&s, &tg)).unwrap();
        let back = MeasurementSeries::read_csv(&path, &tg).unwrap();
        assert_eq!(back, s);
        let coarse = MeasurementSeries::read_csv(&path, &TimeGrid::new(2.0, 4).unwrap()).unwrap();
        assert_eq!(coarse.steps(), 4);
        assert!(MeasurementSeries::read_csv(&path, &TimeGrid::new(2.0, 3).unwrap()).is_err());
    }
}
