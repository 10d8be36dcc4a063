//! Decoupled kernel reconstruction.
//!
//! For `i = 1..n` the scalar measurement balance
//!
//! ```text
//! m'_i + (g_i,1)_Γ + K_i (h_i,1) + Σ_{k=1}^{i} K_k m_{i-k} τ = (f_{i-1},1)
//! ```
//!
//! is solved for `K_i` first; then `u_i` follows from the elliptic step of
//! [`crate::forward`] with the now known `K_i`. Moving the `k = i` term to
//! the left gives the update denominator `(h_i,1) + m_0 τ`.

use std::sync::Arc;

use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::forward::{ForwardError, KernelSeries, StepData, Stepper, Trajectory};
use crate::grid::{GridFunction, SpatialGrid};
use crate::problem::{DerivativeSource, MeasurementSeries, ProblemError, ProblemSpec, TimeGrid};

/// Denominators smaller than this abort the update.
pub const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum InverseError {
    #[error("step size {} violates tau < tau0 = {} (omega = {omega}, |m_0| = {m0_abs})", .report.tau, .report.tau0, omega = .report.omega, m0_abs = .report.m0.abs())]
    Threshold { report: ThresholdReport },
    #[error("step {step}: singular kernel update, denominator {denominator:e}")]
    Singular { step: usize, denominator: f64 },
    #[error("step {step}: non-finite kernel value")]
    NonFinite { step: usize },
    #[error("measurement has {found} steps, time grid has {expected}")]
    Misaligned { expected: usize, found: usize },
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

impl InverseError {
    pub fn is_validation(&self) -> bool {
        match self {
            InverseError::Threshold { .. } => true,
            InverseError::Problem(p) => p.is_validation(),
            InverseError::Forward(ForwardError::Problem(p)) => p.is_validation(),
            _ => false,
        }
    }
}

/// Outcome of the step-size test `tau < tau0 = min(1, omega / (2 |m_0|))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub omega: f64,
    pub m0: f64,
    pub tau: f64,
    pub tau0: f64,
    /// `omega - |m_0| tau`
    pub margin: f64,
    pub passed: bool,
}

pub fn check_step_threshold(omega: f64, m0: f64, tau: f64) -> ThresholdReport {
    let tau0 = if m0 == 0.0 {
        1.0
    } else {
        (omega / (2.0 * m0.abs())).min(1.0)
    };
    ThresholdReport {
        omega,
        m0,
        tau,
        tau0,
        margin: omega - m0.abs() * tau,
        passed: tau < tau0,
    }
}

/// Sign in front of `m_0 τ` in the update denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorSign {
    #[default]
    Plus,
    /// Reproduces the printed `(h_i,1) - m_0 τ` variant; debugging only.
    Minus,
}

impl std::str::FromStr for DenominatorSign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plus" | "+" => Ok(DenominatorSign::Plus),
            "minus" | "-" => Ok(DenominatorSign::Minus),
            _ => Err(format!("expected plus or minus, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    pub sign: DenominatorSign,
    /// Run despite a step-size threshold violation.
    pub force: bool,
    pub trace: bool,
    pub linear_tol: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            sign: DenominatorSign::Plus,
            force: false,
            trace: false,
            linear_tol: crate::solver::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelUpdate {
    pub value: f64,
    pub denominator: f64,
}

/// `K_i` from the measurement balance given `K_0..K_{i-1}` (only
/// `K_1..K_{i-1}` enter) and the integrals of step `i`.
pub fn kernel_from_masses(
    i: usize,
    measurement: &MeasurementSeries,
    previous: &[f64],
    data: &StepData,
    tau: f64,
    sign: DenominatorSign,
) -> Result<KernelUpdate, InverseError> {
    let history: f64 = (1..i).map(|k| previous[k] * measurement.value(i - k)).sum::<f64>() * tau;
    let m0_tau = measurement.m0() * tau;
    let denominator = match sign {
        DenominatorSign::Plus => data.h_mass + m0_tau,
        DenominatorSign::Minus => data.h_mass - m0_tau,
    };
    if !(denominator.abs() >= MIN_DENOMINATOR) {
        return Err(InverseError::Singular { step: i, denominator });
    }
    let numerator = data.source_mass - measurement.rate(i) - data.flux_mass - history;
    let value = numerator / denominator;
    if !value.is_finite() {
        return Err(InverseError::NonFinite { step: i });
    }
    Ok(KernelUpdate { value, denominator })
}

/// `K_i` for step `i` from data and the previous state `u_{i-1}`.
pub fn kernel_update(
    spec: &ProblemSpec,
    grid: &Arc<SpatialGrid>,
    time: &TimeGrid,
    measurement: &MeasurementSeries,
    previous: &[f64],
    u_prev: &GridFunction,
    i: usize,
) -> Result<KernelUpdate, InverseError> {
    if i == 0 || i > measurement.steps() || previous.len() < i {
        return Err(ForwardError::Index {
            i,
            n: measurement.steps(),
        }
        .into());
    }
    let stepper = Stepper::new(spec, grid.clone(), *time);
    let data = stepper.data(i, u_prev)?;
    kernel_from_masses(i, measurement, previous, &data, time.tau(), DenominatorSign::Plus)
}

/// `Σ_{i=1}^{n} |(K_i - K_{i-1}) / τ|^2 τ`.
pub fn kernel_difference_energy(kernel: &[f64], tau: f64) -> f64 {
    kernel
        .windows(2)
        .map(|w| {
            let d = (w[1] - w[0]) / tau;
            d * d * tau
        })
        .sum()
}

/// Discrete stability functionals of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `max_{1<=i<=n} |K_i|`
    pub max_kernel: f64,
    /// `max_j ||u_j||^2`
    pub max_l2_sq: f64,
    /// `Σ ||∇u_i||^2 τ`
    pub grad_energy: f64,
    /// `Σ ||u_i - u_{i-1}||^2`
    pub increment_sq: f64,
    /// `max_j ||∇u_j||^2`
    pub max_grad_sq: f64,
    /// `Σ ||δu_i||^2 τ`
    pub rate_energy: f64,
    /// `Σ ||∇u_i - ∇u_{i-1}||^2`
    pub grad_increment_sq: f64,
    /// `Σ ||A_h u_i||^2 τ`, discrete Laplacian energy
    pub laplacian_energy: f64,
    /// `Σ |δK_i|^2 τ`
    pub kernel_rate_energy: f64,
    /// `min_i |(h_i,1) ± m_0 τ|`; infinite for forward-only runs.
    pub min_denominator: f64,
}

impl Diagnostics {
    pub fn compute(trajectory: &Trajectory, kernel: &[f64], denominators: &[f64]) -> Self {
        let tau = trajectory.time().tau();
        let states = trajectory.states();
        let mut d = Diagnostics {
            max_kernel: kernel.iter().skip(1).fold(0.0, |m, k| m.max(k.abs())),
            max_l2_sq: 0.0,
            grad_energy: 0.0,
            increment_sq: 0.0,
            max_grad_sq: 0.0,
            rate_energy: 0.0,
            grad_increment_sq: 0.0,
            laplacian_energy: 0.0,
            kernel_rate_energy: kernel_difference_energy(kernel, tau),
            min_denominator: denominators.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
        };
        for (j, u) in states.iter().enumerate() {
            let grad = u.grad_seminorm_sq();
            d.max_l2_sq = d.max_l2_sq.max(u.norm_sq());
            d.max_grad_sq = d.max_grad_sq.max(grad);
            if j == 0 {
                continue;
            }
            d.grad_energy += grad * tau;
            d.laplacian_energy += u.stiffness_apply().norm_sq() * tau;
            let mut diff = u.clone();
            diff.axpy(-1.0, &states[j - 1]);
            let inc = diff.norm_sq();
            d.increment_sq += inc;
            d.rate_energy += inc / tau;
            d.grad_increment_sq += diff.grad_seminorm_sq();
        }
        d
    }
}

/// Per-step record of a reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub t: f64,
    pub kernel: f64,
    pub denominator: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub kernel: KernelSeries,
    pub trajectory: Trajectory,
    pub diagnostics: Diagnostics,
    pub trace: Vec<StepTrace>,
    pub threshold: ThresholdReport,
    pub derivative_source: DerivativeSource,
    pub sign: DenominatorSign,
    pub warnings: Vec<String>,
}

impl ReconstructionResult {
    pub fn denominators(&self) -> Vec<f64> {
        self.trace.iter().map(|s| s.denominator).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.trace.iter().fold(0.0, |m, s| m.max(s.residual))
    }
}

/// Initial kernel value from the balance at `t = 0`:
/// `m'_0 + (g_0,1)_Γ + K_0 (h_0,1) = (f_0,1)`.
fn initial_kernel(
    spec: &ProblemSpec,
    grid: &Arc<SpatialGrid>,
    measurement: &MeasurementSeries,
    u0: &GridFunction,
    warnings: &mut Vec<String>,
) -> Result<f64, InverseError> {
    let exact = spec.kernel_at(0.0).transpose()?;
    let rate = match (measurement.initial_rate(), exact) {
        (Some(r), _) => r,
        (None, Some(k)) => return Ok(k),
        // sampled data without m'(0): forward difference over the first step
        (None, None) => measurement.rate(1),
    };
    let source_mass = spec.source_field(0.0, u0)?.integral();
    let h_mass = spec.h_mass(grid, 0.0)?;
    let flux = spec.boundary_values(grid, 0.0)?;
    let flux_mass = GridFunction::constant(grid.clone(), 1.0)
        .boundary_inner(&flux)
        .map_err(ProblemError::from)?;
    if h_mass.abs() < MIN_DENOMINATOR {
        return Err(InverseError::Singular {
            step: 0,
            denominator: h_mass,
        });
    }
    let k0 = (source_mass - rate - flux_mass) / h_mass;
    if let Some(k) = exact {
        if (k0 - k).abs() > 1e-3 * (1.0 + k.abs()) {
            let msg = format!("initial kernel value {k0} differs from K_exact(0) = {k}");
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(k0)
}

/// Recover `K_0..K_n` and `u_0..u_n` from the measurement.
pub fn reconstruct(
    spec: &ProblemSpec,
    grid: &Arc<SpatialGrid>,
    time: &TimeGrid,
    measurement: &MeasurementSeries,
    options: &ReconstructOptions,
) -> Result<ReconstructionResult, InverseError> {
    if measurement.steps() != time.steps() {
        return Err(InverseError::Misaligned {
            expected: time.steps(),
            found: measurement.steps(),
        });
    }
    let mut warnings = Vec::new();
    let threshold = check_step_threshold(spec.omega, measurement.m0(), time.tau());
    if !threshold.passed {
        if !options.force {
            return Err(InverseError::Threshold { report: threshold });
        }
        let msg = format!(
            "forced run: tau = {} is not below tau0 = {}",
            threshold.tau, threshold.tau0
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    spec.check_omega_floor(grid, time)?;

    let stepper = Stepper::new(spec, grid.clone(), *time).with_tolerance(options.linear_tol);
    let n = time.steps();
    let mut states = Vec::with_capacity(n + 1);
    states.push(spec.initial_field(grid)?);
    let mut kernel = Vec::with_capacity(n + 1);
    kernel.push(initial_kernel(spec, grid, measurement, &states[0], &mut warnings)?);
    let mut trace = Vec::with_capacity(n);

    for i in 1..=n {
        let data = stepper.data(i, &states[i - 1])?;
        let update = kernel_from_masses(i, measurement, &kernel, &data, time.tau(), options.sign)?;
        kernel.push(update.value);
        let out = stepper.solve(i, &data, &kernel, &states)?;
        let row = StepTrace {
            step: i,
            t: time.t(i),
            kernel: update.value,
            denominator: update.denominator,
            residual: out.residual,
        };
        if options.trace {
            info!(
                "step {} t={} K={} denominator={} residual={:e}",
                row.step, row.t, row.kernel, row.denominator, row.residual
            );
        }
        trace.push(row);
        states.push(out.state);
    }

    let trajectory = Trajectory::new(*time, states);
    let denominators: Vec<f64> = trace.iter().map(|s| s.denominator).collect();
    let diagnostics = Diagnostics::compute(&trajectory, &kernel, &denominators);
    Ok(ReconstructionResult {
        kernel: KernelSeries::new(kernel)?,
        trajectory,
        diagnostics,
        trace,
        threshold,
        derivative_source: measurement.provenance(),
        sign: options.sign,
        warnings,
    })
}
