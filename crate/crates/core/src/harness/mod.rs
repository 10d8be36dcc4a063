//! Experiment orchestration: single runs, same-grid round trips,
//! time-refinement studies and noise sweeps.

pub mod cli;
pub mod report;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, Document};
use crate::forward::{simulate, ForwardError, KernelSeries};
use crate::grid::SpatialGrid;
use crate::inverse::{reconstruct, DenominatorSign, InverseError, ReconstructOptions, ReconstructionResult};
use crate::problem::{
    self, load_from_document, DerivativeSource, Discretization, LoadedProblem, MeasurementSeries,
    ProblemError, ProblemSpec, TimeGrid,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Numerical(_) | HarnessError::Io { .. } => 2,
            HarnessError::Validation(_) => 3,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Usage(e.to_string())
    }
}

impl From<ProblemError> for HarnessError {
    fn from(e: ProblemError) -> Self {
        match e {
            e if e.is_validation() => HarnessError::Validation(e.to_string()),
            ProblemError::Eval { .. } | ProblemError::Grid(_) | ProblemError::Measurement(_) => {
                HarnessError::Numerical(e.to_string())
            }
            e => HarnessError::Usage(e.to_string()),
        }
    }
}

impl From<ForwardError> for HarnessError {
    fn from(e: ForwardError) -> Self {
        match e {
            ForwardError::Problem(p) => p.into(),
            e => HarnessError::Numerical(e.to_string()),
        }
    }
}

impl From<InverseError> for HarnessError {
    fn from(e: InverseError) -> Self {
        if e.is_validation() {
            return HarnessError::Validation(e.to_string());
        }
        match e {
            InverseError::Problem(p) => p.into(),
            InverseError::Forward(f) => f.into(),
            e => HarnessError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Forward,
    Reconstruct,
    Roundtrip,
    Convergence,
    NoiseSweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Reconstruct => "reconstruct",
            Mode::Roundtrip => "roundtrip",
            Mode::Convergence => "convergence",
            Mode::NoiseSweep => "noise-sweep",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "forward" => Mode::Forward,
            "reconstruct" => Mode::Reconstruct,
            "roundtrip" => Mode::Roundtrip,
            "convergence" => Mode::Convergence,
            "noise-sweep" => Mode::NoiseSweep,
            _ => return Err(format!("unknown mode `{s}`")),
        })
    }
}

/// Where measurement data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Sample the `m` (and `m_prime`) expressions.
    Analytic,
    /// Forward run with `K_exact` on a refined grid.
    Synthetic,
    /// `measurement_file`.
    File,
}

impl std::str::FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "analytic" => DataSource::Analytic,
            "synthetic" => DataSource::Synthetic,
            "file" => DataSource::File,
            _ => return Err(format!("unknown data source `{s}`")),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub problem: ProblemSpec,
    /// Time step counts; a single entry except in convergence studies.
    pub n_list: Vec<usize>,
    /// Cells in x; convergence studies use the largest.
    pub mx_list: Vec<usize>,
    pub my: Option<usize>,
    pub derivative: Option<DerivativeSource>,
    pub data: Option<DataSource>,
    /// Synthetic data uses `n * fine_time` steps and `mx * fine_space` cells.
    pub fine_time: usize,
    pub fine_space: usize,
    pub noise: Vec<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub force: bool,
    pub trace: bool,
    pub sign: DenominatorSign,
}

const EXPERIMENT_KEYS: &[&str] = &[
    "mode",
    "n_list",
    "mx_list",
    "data",
    "fine_factor",
    "fine_space_factor",
    "noise",
    "seed",
    "out",
    "json",
    "force",
    "trace",
    "kernel_denominator_sign",
];

impl ExperimentConfig {
    pub fn new(mode: Mode, loaded: LoadedProblem) -> Self {
        let d = loaded.discretization;
        ExperimentConfig {
            mode,
            problem: loaded.spec,
            n_list: vec![d.n],
            mx_list: vec![d.mx],
            my: d.my,
            derivative: d.derivative,
            data: None,
            fine_time: 4,
            fine_space: 2,
            noise: Vec::new(),
            seed: None,
            out: None,
            json: None,
            force: false,
            trace: false,
            sign: DenominatorSign::Plus,
        }
    }

    /// Build from a config file text; `mode` falls back to the `[experiment]` entry.
    pub fn from_config_text(text: &str, mode: Option<Mode>) -> Result<Self, HarnessError> {
        let doc = Document::parse(text)?;
        let loaded = load_from_document(&doc)?;
        const S: &str = "experiment";
        doc.check_keys(S, EXPERIMENT_KEYS)?;
        let file_mode = doc
            .get_str(S, "mode")
            .map(|m| m.parse::<Mode>().map_err(HarnessError::Usage))
            .transpose()?;
        let mode = match (mode, file_mode) {
            (Some(a), Some(b)) if a != b => {
                return Err(HarnessError::Usage(format!(
                    "config requests mode {} but {} was invoked",
                    b.name(),
                    a.name()
                )))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => return Err(HarnessError::Usage("no mode given".into())),
        };
        let disc_n = doc.get("discretization", "n").is_some();
        let disc_mx = doc.get("discretization", "mx").is_some();
        let mut cfg = ExperimentConfig::new(mode, loaded);
        if let Some(v) = doc.get_list::<usize>(S, "n_list", "a list of step counts")? {
            if disc_n {
                return Err(HarnessError::Usage("give either n or n_list, not both".into()));
            }
            cfg.n_list = v;
        }
        if let Some(v) = doc.get_list::<usize>(S, "mx_list", "a list of cell counts")? {
            if disc_mx {
                return Err(HarnessError::Usage("give either mx or mx_list, not both".into()));
            }
            cfg.mx_list = v;
        }
        if let Some(s) = doc.get_str(S, "data") {
            cfg.data = Some(s.parse().map_err(HarnessError::Usage)?);
        }
        if let Some(v) = doc.get_usize(S, "fine_factor")? {
            cfg.fine_time = v;
        }
        if let Some(v) = doc.get_usize(S, "fine_space_factor")? {
            cfg.fine_space = v;
        }
        if let Some(v) = doc.get_list::<f64>(S, "noise", "a list of noise levels")? {
            cfg.noise = v;
        }
        cfg.seed = doc.get_parsed::<u64>(S, "seed", "a non-negative integer")?;
        cfg.out = doc.get_str(S, "out").map(PathBuf::from);
        cfg.json = doc.get_str(S, "json").map(PathBuf::from);
        cfg.force = doc.get_bool(S, "force")?.unwrap_or(false);
        cfg.trace = doc.get_bool(S, "trace")?.unwrap_or(false);
        if let Some(s) = doc.get_str(S, "kernel_denominator_sign") {
            cfg.sign = s.parse().map_err(HarnessError::Usage)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let increasing = |v: &[usize], what: &str| {
            if v.is_empty() || v.contains(&0) || v.windows(2).any(|w| w[0] >= w[1]) {
                Err(HarnessError::Usage(format!(
                    "{what} must be a nonempty, strictly increasing list of positive integers"
                )))
            } else {
                Ok(())
            }
        };
        increasing(&self.n_list, "n")?;
        increasing(&self.mx_list, "mx")?;
        if self.mode != Mode::Convergence && (self.n_list.len() > 1 || self.mx_list.len() > 1) {
            return Err(HarnessError::Usage(format!(
                "mode {} takes a single n and mx",
                self.mode.name()
            )));
        }
        if self.fine_time == 0 || self.fine_space == 0 {
            return Err(HarnessError::Usage("fine factors must be positive".into()));
        }
        match self.mode {
            Mode::NoiseSweep => {
                if self.seed.is_none() {
                    return Err(HarnessError::Usage("noise-sweep requires --seed".into()));
                }
                if self.noise.is_empty() || self.noise.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(HarnessError::Usage(
                        "noise-sweep requires positive noise levels (--noise)".into(),
                    ));
                }
            }
            _ => {
                if self.seed.is_some() {
                    return Err(HarnessError::Usage("--seed only applies to noise-sweep".into()));
                }
                if !self.noise.is_empty() {
                    return Err(HarnessError::Usage("--noise only applies to noise-sweep".into()));
                }
            }
        }
        Ok(())
    }

    fn options(&self) -> ReconstructOptions {
        ReconstructOptions {
            sign: self.sign,
            force: self.force,
            trace: self.trace,
            ..Default::default()
        }
    }

    fn grid(&self, mx: usize) -> Result<Arc<SpatialGrid>, HarnessError> {
        Ok(self.problem.grid(mx, self.my)?)
    }

    fn discretization(&self) -> Discretization {
        Discretization {
            n: self.n_list[0],
            mx: self.mx_list[0],
            my: self.my,
            derivative: self.derivative,
        }
    }

    fn data_source(&self) -> Result<DataSource, HarnessError> {
        let spec = &self.problem;
        if let Some(d) = self.data {
            return Ok(d);
        }
        if spec.measurement_file.is_some() {
            Ok(DataSource::File)
        } else if spec.measurement_exact.is_some() {
            Ok(DataSource::Analytic)
        } else if spec.kernel_exact.is_some() {
            Ok(DataSource::Synthetic)
        } else {
            Err(HarnessError::Usage(
                "no measurement: give m, measurement_file or K_exact".into(),
            ))
        }
    }

    /// Measurement on the reconstruction time grid.
    pub fn measurement(&self, time: &TimeGrid, mx: usize) -> Result<MeasurementSeries, HarnessError> {
        let spec = &self.problem;
        let wants_analytic = self.derivative != Some(DerivativeSource::Discrete);
        let rate_expr = spec.measurement_rate_exact.as_ref().filter(|_| wants_analytic);
        if self.derivative == Some(DerivativeSource::Analytic) && spec.measurement_rate_exact.is_none() {
            return Err(HarnessError::Usage(
                "analytic derivative requested but m_prime is not given".into(),
            ));
        }
        let series = match self.data_source()? {
            DataSource::File => {
                let path = spec.measurement_file.as_ref().ok_or_else(|| {
                    HarnessError::Usage("data source `file` needs measurement_file".into())
                })?;
                MeasurementSeries::read_csv(path, time)?
            }
            DataSource::Analytic => {
                let m = spec.measurement_exact.as_ref().ok_or_else(|| {
                    HarnessError::Usage("data source `analytic` needs m".into())
                })?;
                let values = time
                    .nodes()
                    .map(|t| {
                        m.eval(&crate::Env::new().with(crate::Var::T, t)).map_err(|source| {
                            ProblemError::Eval { what: "m", source }
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                MeasurementSeries::from_samples(values, time.tau())?
            }
            DataSource::Synthetic => {
                let fine_time = TimeGrid::new(time.horizon(), time.steps() * self.fine_time)?;
                let fine_grid = self.problem.grid(mx * self.fine_space, self.my.map(|m| m * self.fine_space))?;
                let kernel = KernelSeries::from_exact(spec, &fine_time)?;
                crate::forward::generate_measurement(
                    spec,
                    &fine_grid,
                    &fine_time,
                    &kernel,
                    DerivativeSource::Discrete,
                    time.steps(),
                )?
            }
        };
        match rate_expr {
            Some(rate) => Ok(series.with_analytic_rates(rate, time)?),
            None => Ok(series),
        }
    }

    fn reference_kernel(&self, time: &TimeGrid) -> Result<Option<Vec<f64>>, HarnessError> {
        if self.problem.kernel_exact.is_none() {
            return Ok(None);
        }
        Ok(Some(KernelSeries::from_exact(&self.problem, time)?.values().to_vec()))
    }
}

/// One row of a refinement study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub tau: f64,
    pub err_inf: f64,
    pub err_l2: f64,
    pub err_u: Option<f64>,
    /// Order against the previous row.
    pub eoc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    /// Fill in `eoc = log(e_{j-1}/e_j) / log(τ_{j-1}/τ_j)` from `err_inf`.
    pub fn from_rows(mut rows: Vec<ConvergenceRow>) -> Self {
        for j in 0..rows.len() {
            rows[j].eoc = if j == 0 {
                None
            } else {
                eoc(rows[j - 1].err_inf, rows[j].err_inf, rows[j - 1].tau, rows[j].tau)
            };
        }
        ConvergenceTable { rows }
    }

    pub fn eocs(&self) -> Vec<Option<f64>> {
        self.rows.iter().skip(1).map(|r| r.eoc).collect()
    }
}

pub fn eoc(e_coarse: f64, e_fine: f64, tau_coarse: f64, tau_fine: f64) -> Option<f64> {
    if e_coarse > 0.0 && e_fine > 0.0 && tau_coarse != tau_fine {
        let v = (e_coarse / e_fine).ln() / (tau_coarse / tau_fine).ln();
        v.is_finite().then_some(v)
    } else {
        None
    }
}

/// `(max_i |K_i - R_i|, (Σ_{i>=1} |K_i - R_i|^2 τ)^{1/2})`.
pub fn kernel_errors(kernel: &[f64], reference: &[f64], tau: f64) -> (f64, f64) {
    let inf = kernel
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let l2 = kernel
        .iter()
        .zip(reference)
        .skip(1)
        .map(|(a, b)| (a - b) * (a - b) * tau)
        .sum::<f64>()
        .sqrt();
    (inf, l2)
}

fn final_state_error(spec: &ProblemSpec, result: &ReconstructionResult) -> Result<Option<f64>, HarnessError> {
    let last = result.trajectory.last();
    let t = result.trajectory.time().horizon();
    match spec.exact_field(last.grid(), t) {
        None => Ok(None),
        Some(exact) => {
            let exact = exact?;
            Ok(Some(
                last.values()
                    .iter()
                    .zip(exact.values())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
            ))
        }
    }
}

/// Reconstruct for every `n` on the finest spatial grid and tabulate the
/// kernel errors against `K_exact`.
pub fn convergence_study(cfg: &ExperimentConfig) -> Result<ConvergenceTable, HarnessError> {
    if cfg.problem.kernel_exact.is_none() {
        return Err(HarnessError::Usage("convergence study needs K_exact".into()));
    }
    let mx = *cfg.mx_list.iter().max().expect("validated nonempty");
    let grid = cfg.grid(mx)?;
    let rows = cfg
        .n_list
        .par_iter()
        .map(|&n| -> Result<ConvergenceRow, HarnessError> {
            let time = TimeGrid::new(cfg.problem.horizon, n)?;
            let m = cfg.measurement(&time, mx)?;
            let result = reconstruct(&cfg.problem, &grid, &time, &m, &cfg.options())?;
            let reference = cfg.reference_kernel(&time)?.expect("checked above");
            let (err_inf, err_l2) = kernel_errors(result.kernel.values(), &reference, time.tau());
            Ok(ConvergenceRow {
                n,
                tau: time.tau(),
                err_inf,
                err_l2,
                err_u: final_state_error(&cfg.problem, &result)?,
                eoc: None,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ConvergenceTable::from_rows(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub sigma: f64,
    pub err_inf: f64,
    pub err_l2: f64,
    /// `err_inf / sigma`
    pub amplification: Option<f64>,
}

/// Reconstruct from measurements perturbed at each noise level. Level `k`
/// draws from a generator seeded with `seed + k`.
pub fn noise_sweep(cfg: &ExperimentConfig) -> Result<Vec<NoiseRow>, HarnessError> {
    let seed = cfg
        .seed
        .ok_or_else(|| HarnessError::Usage("noise-sweep requires --seed".into()))?;
    let time = TimeGrid::new(cfg.problem.horizon, cfg.n_list[0])?;
    let reference = cfg
        .reference_kernel(&time)?
        .ok_or_else(|| HarnessError::Usage("noise-sweep needs K_exact".into()))?;
    let mx = cfg.mx_list[0];
    let grid = cfg.grid(mx)?;
    let clean = cfg.measurement(&time, mx)?;
    cfg.noise
        .par_iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let noisy = clean.with_noise(sigma, time.tau(), &mut rng)?;
            let result = reconstruct(&cfg.problem, &grid, &time, &noisy, &cfg.options())?;
            let (err_inf, err_l2) = kernel_errors(result.kernel.values(), &reference, time.tau());
            Ok(NoiseRow {
                sigma,
                err_inf,
                err_l2,
                amplification: Some(err_inf / sigma).filter(|a| a.is_finite()),
            })
        })
        .collect()
}

/// Outputs of one experiment, not yet written anywhere.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: String,
    pub report: Value,
    pub summary: String,
}

/// Same-grid round trip: forward data from `K_exact`, then reconstruction
/// from `M_i` with `δM_i` rates on the identical discretization.
#[derive(Debug, Clone)]
pub struct RoundTrip {
    pub forward_kernel: Vec<f64>,
    pub result: ReconstructionResult,
    pub kernel_error: f64,
    pub state_error: f64,
}

pub fn round_trip(cfg: &ExperimentConfig) -> Result<RoundTrip, HarnessError> {
    let time = TimeGrid::new(cfg.problem.horizon, cfg.n_list[0])?;
    let grid = cfg.grid(cfg.mx_list[0])?;
    if cfg.problem.kernel_exact.is_none() {
        return Err(HarnessError::Usage("roundtrip needs K_exact".into()));
    }
    let kernel = KernelSeries::from_exact(&cfg.problem, &time)?;
    let fwd = simulate(&cfg.problem, &grid, &time, &kernel)?;
    let m = MeasurementSeries::from_samples(fwd.measurements.clone(), time.tau())?;
    let result = reconstruct(&cfg.problem, &grid, &time, &m, &cfg.options())?;
    let kernel_error = result
        .kernel
        .values()
        .iter()
        .zip(kernel.values())
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let state_error = result
        .trajectory
        .states()
        .iter()
        .zip(fwd.trajectory.states())
        .flat_map(|(a, b)| a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    Ok(RoundTrip {
        forward_kernel: kernel.values().to_vec(),
        result,
        kernel_error,
        state_error,
    })
}

fn config_echo(cfg: &ExperimentConfig) -> Value {
    json!({
        "mode": cfg.mode.name(),
        "problem": cfg.problem.name,
        "config": cfg.problem.to_config(Some(&cfg.discretization())),
        "n": cfg.n_list,
        "mx": cfg.mx_list,
        "my": cfg.my,
        "derivative": cfg.derivative.map(|d| d.to_string()),
        "fine_factor": cfg.fine_time,
        "fine_space_factor": cfg.fine_space,
        "noise": cfg.noise,
        "seed": cfg.seed,
        "force": cfg.force,
        "assume_f_bounded": cfg.problem.assume_f_bounded,
    })
}

/// Run the configured experiment.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut report = json!({ "config": config_echo(cfg) });
    let (csv, summary) = match cfg.mode {
        Mode::Forward => {
            let time = TimeGrid::new(cfg.problem.horizon, cfg.n_list[0])?;
            let grid = cfg.grid(cfg.mx_list[0])?;
            let kernel = KernelSeries::from_exact(&cfg.problem, &time)?;
            let run = simulate(&cfg.problem, &grid, &time, &kernel)?;
            let series = MeasurementSeries::from_samples(run.measurements.clone(), time.tau())?;
            let diagnostics = crate::inverse::Diagnostics::compute(&run.trajectory, kernel.values(), &[]);
            let max_res = run.residuals.iter().fold(0.0f64, |a, b| a.max(*b));
            report["diagnostics"] = report::diagnostics_json(&diagnostics);
            report["max_compatibility_residual"] = json!(max_res);
            (
                problem::measurement_csv(&series, &time),
                format!("forward: n = {}, M_n = {}", time.steps(), series.value(time.steps())),
            )
        }
        Mode::Reconstruct => {
            let time = TimeGrid::new(cfg.problem.horizon, cfg.n_list[0])?;
            let grid = cfg.grid(cfg.mx_list[0])?;
            let m = cfg.measurement(&time, cfg.mx_list[0])?;
            let result = reconstruct(&cfg.problem, &grid, &time, &m, &cfg.options())?;
            let reference = cfg.reference_kernel(&time)?;
            let mut summary = format!("reconstruct: n = {}, K_n = {}", time.steps(), result.kernel.get(time.steps()));
            report["result"] = report::reconstruction_json(&result);
            if let Some(r) = &reference {
                let (e_inf, e_l2) = kernel_errors(result.kernel.values(), r, time.tau());
                report["errors"] = json!({ "err_inf": e_inf, "err_l2": e_l2 });
                summary.push_str(&format!(", max |K - K_exact| = {e_inf:e}"));
            }
            if cfg.trace {
                report["trace"] = serde_json::to_value(&result.trace).unwrap_or(Value::Null);
            }
            (report::kernel_csv(result.kernel.values(), reference.as_deref(), &time), summary)
        }
        Mode::Roundtrip => {
            let rt = round_trip(cfg)?;
            let time = *rt.result.trajectory.time();
            report["result"] = report::reconstruction_json(&rt.result);
            report["errors"] = json!({ "kernel": rt.kernel_error, "state": rt.state_error });
            (
                report::kernel_csv(rt.result.kernel.values(), Some(&rt.forward_kernel), &time),
                format!(
                    "roundtrip: max |K - K_forward| = {:e}, max |u - u_forward| = {:e}",
                    rt.kernel_error, rt.state_error
                ),
            )
        }
        Mode::Convergence => {
            let table = convergence_study(cfg)?;
            report["table"] = json!(table
                .rows
                .iter()
                .map(|r| json!({
                    "n": r.n, "tau": r.tau, "err_inf": r.err_inf, "err_l2": r.err_l2,
                    "err_u": r.err_u, "eoc": r.eoc,
                }))
                .collect::<Vec<_>>());
            (report::table_csv(&table), report::table_text(&table))
        }
        Mode::NoiseSweep => {
            let rows = noise_sweep(cfg)?;
            report["sweep"] = json!(rows
                .iter()
                .map(|r| json!({
                    "sigma": r.sigma, "err_inf": r.err_inf, "err_l2": r.err_l2,
                    "amplification": r.amplification,
                }))
                .collect::<Vec<_>>());
            let summary = rows
                .iter()
                .map(|r| format!("sigma = {:e}: err_inf = {:e}", r.sigma, r.err_inf))
                .collect::<Vec<_>>()
                .join("\n");
            (report::noise_csv(&rows), summary)
        }
    };
    report["timings"] = json!({ "total_seconds": started.elapsed().as_secs_f64() });
    Ok(RunOutput {
        csv,
        report,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: Mode, preset: &str) -> ExperimentConfig {
        ExperimentConfig::new(
            mode,
            LoadedProblem {
                spec: problem::preset(preset).unwrap(),
                discretization: Discretization::default(),
            },
        )
    }

    #[test]
    fn eoc_definition() {
        assert!((eoc(0.1, 0.05, 0.02, 0.01).unwrap() - 1.0).abs() < 1e-14);
        assert!((eoc(0.4, 0.1, 0.02, 0.01).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(eoc(0.0, 0.0, 0.02, 0.01), None);
    }

    #[test]
    fn table_with_identical_reference() {
        let rows = vec![
            ConvergenceRow { n: 10, tau: 0.1, err_inf: 0.0, err_l2: 0.0, err_u: None, eoc: None },
            ConvergenceRow { n: 20, tau: 0.05, err_inf: 0.0, err_l2: 0.0, err_u: None, eoc: None },
        ];
        let t = ConvergenceTable::from_rows(rows);
        assert_eq!(t.eocs(), vec![None]);
        assert!(report::table_csv(&t).lines().all(|l| l.starts_with('n') || l.ends_with(report::NO_EOC)));
    }

    #[test]
    fn single_row_study() {
        let mut c = cfg(Mode::Convergence, "manufactured1d");
        c.n_list = vec![20];
        c.mx_list = vec![20];
        let t = convergence_study(&c).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].eoc, None);
    }

    #[test]
    fn config_invariants() {
        let mut c = cfg(Mode::Convergence, "zero");
        c.n_list = vec![10, 10];
        assert!(matches!(c.validate(), Err(HarnessError::Usage(_))));
        c.n_list = vec![];
        assert!(c.validate().is_err());
        let mut c = cfg(Mode::NoiseSweep, "zero");
        c.noise = vec![0.1];
        assert!(c.validate().is_err());
        c.seed = Some(1);
        c.validate().unwrap();
        let mut c = cfg(Mode::Reconstruct, "zero");
        c.seed = Some(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn experiment_section_parsing() {
        let text = "[problem]\npreset = \"manufactured1d\"\n[experiment]\nmode = \"convergence\"\nn_list = 10, 20\nmx_list = 8, 16\n";
        let c = ExperimentConfig::from_config_text(text, None).unwrap();
        assert_eq!(c.mode, Mode::Convergence);
        assert_eq!(c.n_list, vec![10, 20]);
        assert!(ExperimentConfig::from_config_text(text, Some(Mode::Forward)).is_err());
        assert!(ExperimentConfig::from_config_text("[experiment]\nbogus = 1\n[problem]\npreset = \"zero\"\n", Some(Mode::Forward)).is_err());
    }

    #[test]
    fn synthetic_data_uses_finer_grids() {
        let mut c = cfg(Mode::Reconstruct, "contaminant");
        c.n_list = vec![20];
        c.mx_list = vec![20];
        let time = TimeGrid::new(1.0, 20).unwrap();
        let m = c.measurement(&time, 20).unwrap();
        assert_eq!(m.steps(), 20);
        assert_eq!(m.provenance(), DerivativeSource::Discrete);
        let out = execute(&c).unwrap();
        assert_eq!(out.csv.lines().count(), 22);
        let err = out.report["errors"]["err_inf"].as_f64().unwrap();
        assert!(err < 0.1, "{err}");
    }

    #[test]
    fn noise_sweep_is_deterministic() {
        let mut c = cfg(Mode::NoiseSweep, "manufactured1d");
        c.n_list = vec![20];
        c.mx_list = vec![20];
        c.noise = vec![1e-4, 1e-3];
        c.seed = Some(5);
        let a = execute(&c).unwrap().csv;
        let b = execute(&c).unwrap().csv;
        assert_eq!(a, b);
        assert_eq!(a.lines().next(), Some(report::NOISE_HEADER));
    }
}
