//! Backward-Euler time stepping with a known kernel.
//!
//! Step `i` finds `u_i` with, for every nodal test function `φ`,
//!
//! ```text
//! (u_i/τ, φ) + a(u_i, φ) = (f_{i-1} + u_{i-1}/τ - K_i h_i - Σ_{k=1}^{i} K_k u_{i-k} τ, φ) - (g_i, φ)_Γ
//! ```
//!
//! where `f_{i-1} = f(·, t_{i-1}, u_{i-1}, ∇u_{i-1})`. The memory term is
//! fully explicit in `u`. Testing with `φ = 1` gives the scalar balance
//! checked by [`compatibility_residual`].

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{GridFunction, SpatialGrid};
use crate::problem::{DerivativeSource, MeasurementSeries, ProblemError, ProblemSpec, TimeGrid};
use crate::solver::{SolverError, SpdOperator, DEFAULT_TOL};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("step {step}: linear solve failed: {source}")]
    Solver { step: usize, source: SolverError },
    #[error("step {step}: non-finite state")]
    NonFinite { step: usize },
    #[error("step index {i} outside 1..={n}")]
    Index { i: usize, n: usize },
    #[error("kernel has {found} samples, time grid needs {expected}")]
    KernelLength { expected: usize, found: usize },
    #[error("non-finite kernel sample at index {0}")]
    KernelNonFinite(usize),
}

/// Kernel samples `K_0..K_n` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSeries {
    values: Vec<f64>,
}

impl KernelSeries {
    pub fn new(values: Vec<f64>) -> Result<Self, ForwardError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ForwardError::KernelNonFinite(i));
        }
        Ok(KernelSeries { values })
    }

    /// Samples of the exact kernel of `spec`.
    pub fn from_exact(spec: &ProblemSpec, tg: &TimeGrid) -> Result<Self, ForwardError> {
        let values = tg
            .nodes()
            .map(|t| {
                spec.kernel_at(t)
                    .unwrap_or_else(|| Err(ProblemError::Invalid("no exact kernel K_exact".into())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Keep every `factor`-th sample.
    pub fn subsample(&self, factor: usize) -> KernelSeries {
        KernelSeries {
            values: self.values.iter().step_by(factor.max(1)).copied().collect(),
        }
    }
}

/// States `u_0..u_n` on a time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    time: TimeGrid,
    states: Vec<GridFunction>,
}

impl Trajectory {
    pub fn new(time: TimeGrid, states: Vec<GridFunction>) -> Self {
        Trajectory { time, states }
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn states(&self) -> &[GridFunction] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &GridFunction {
        &self.states[i]
    }

    pub fn last(&self) -> &GridFunction {
        self.states.last().expect("trajectory holds u_0")
    }

    /// `M_i = (u_i, 1)`.
    pub fn measurements(&self) -> Vec<f64> {
        self.states.iter().map(GridFunction::integral).collect()
    }
}

/// `Σ_{k=1}^{i} K_k u_{i-k} τ` nodewise. `kernel` must hold at least
/// `K_0..K_i` and `states` at least `u_0..u_{i-1}`.
pub fn convolution_quadrature(
    kernel: &[f64],
    states: &[GridFunction],
    i: usize,
    tau: f64,
) -> Result<GridFunction, ForwardError> {
    if i == 0 || i >= kernel.len() || i > states.len() {
        return Err(ForwardError::Index {
            i,
            n: (kernel.len().saturating_sub(1)).min(states.len()),
        });
    }
    let mut acc = vec![0.0; states[0].values().len()];
    for k in 1..=i {
        let w = kernel[k] * tau;
        for (a, u) in acc.iter_mut().zip(states[i - k].values()) {
            *a += w * u;
        }
    }
    Ok(GridFunction::new(states[0].grid().clone(), acc).map_err(ProblemError::from)?)
}

/// Data of step `i` that does not depend on `K_i`.
#[derive(Debug, Clone)]
pub struct StepData {
    pub source: GridFunction,
    pub h: GridFunction,
    pub flux: Vec<f64>,
    /// `(f_{i-1}, 1)`
    pub source_mass: f64,
    /// `(h_i, 1)`
    pub h_mass: f64,
    /// `(g_i, 1)_Γ`
    pub flux_mass: f64,
}

/// Everything a step needs that stays fixed over a run.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    spec: &'a ProblemSpec,
    grid: Arc<SpatialGrid>,
    time: TimeGrid,
    op: SpdOperator,
    tol: f64,
    ones: GridFunction,
}

/// Output of one elliptic step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: GridFunction,
    pub memory: GridFunction,
    /// Relative residual of the `φ = 1` balance.
    pub residual: f64,
}

impl<'a> Stepper<'a> {
    pub fn new(spec: &'a ProblemSpec, grid: Arc<SpatialGrid>, time: TimeGrid) -> Self {
        let op = SpdOperator::backward_euler(&grid, time.tau());
        let ones = GridFunction::constant(grid.clone(), 1.0);
        Stepper {
            spec,
            grid,
            time,
            op,
            tol: DEFAULT_TOL,
            ones,
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    /// Evaluate `f_{i-1}`, `h_i`, `g_i` and their integrals.
    pub fn data(&self, i: usize, previous: &GridFunction) -> Result<StepData, ForwardError> {
        let source = self.spec.source_field(self.time.t(i - 1), previous)?;
        let t = self.time.t(i);
        let h = self.spec.h_field(&self.grid, t)?;
        let flux = self.spec.boundary_values(&self.grid, t)?;
        let flux_mass = self.ones.boundary_inner(&flux).map_err(ProblemError::from)?;
        Ok(StepData {
            source_mass: source.integral(),
            h_mass: h.integral(),
            flux_mass,
            source,
            h,
            flux,
        })
    }

    /// Solve for `u_i` given `K_0..K_i` and `u_0..u_{i-1}`.
    pub fn solve(
        &self,
        i: usize,
        data: &StepData,
        kernel: &[f64],
        states: &[GridFunction],
    ) -> Result<StepOutcome, ForwardError> {
        let n = self.time.steps();
        if i == 0 || i > n {
            return Err(ForwardError::Index { i, n });
        }
        let tau = self.time.tau();
        let k_i = kernel[i];
        let memory = convolution_quadrature(kernel, states, i, tau)?;
        let previous = &states[i - 1];
        let w = self.grid.weights();
        let mut load: Vec<f64> = (0..w.len())
            .map(|j| {
                w[j] * (data.source.values()[j] + previous.values()[j] / tau
                    - k_i * data.h.values()[j]
                    - memory.values()[j])
            })
            .collect();
        for ((&j, b), g) in self
            .grid
            .boundary_nodes()
            .iter()
            .zip(self.grid.boundary_weights())
            .zip(&data.flux)
        {
            load[j] -= b * g;
        }
        let values = self
            .op
            .solve(&load, self.tol, 20 * w.len() + 100)
            .map_err(|source| ForwardError::Solver { step: i, source })?;
        let state = GridFunction::new(self.grid.clone(), values)
            .map_err(|_| ForwardError::NonFinite { step: i })?;
        let residual = compatibility_residual(
            previous.integral(),
            state.integral(),
            tau,
            data,
            k_i,
            memory.integral(),
        );
        Ok(StepOutcome {
            state,
            memory,
            residual,
        })
    }
}

/// Relative residual of
/// `δM_i + (g_i,1)_Γ + K_i (h_i,1) + (Σ K_k u_{i-k} τ, 1) - (f_{i-1},1) = 0`.
pub fn compatibility_residual(
    m_prev: f64,
    m_next: f64,
    tau: f64,
    data: &StepData,
    k_i: f64,
    memory_mass: f64,
) -> f64 {
    let terms = [
        m_next / tau,
        -m_prev / tau,
        data.flux_mass,
        k_i * data.h_mass,
        memory_mass,
        -data.source_mass,
    ];
    let sum: f64 = terms.iter().sum();
    let scale: f64 = terms.iter().map(|v| v.abs()).sum();
    if scale == 0.0 {
        0.0
    } else {
        sum.abs() / scale
    }
}

/// Single forward step: `u_i` from `K_0..K_i` and `u_0..u_{i-1}`.
pub fn forward_step(
    spec: &ProblemSpec,
    grid: &Arc<SpatialGrid>,
    time: &TimeGrid,
    kernel: &KernelSeries,
    i: usize,
    states: &[GridFunction],
) -> Result<GridFunction, ForwardError> {
    let stepper = Stepper::new(spec, grid.clone(), *time);
    if i == 0 || i > time.steps() || states.len() < i {
        return Err(ForwardError::Index {
            i,
            n: time.steps(),
        });
    }
    let data = stepper.data(i, &states[i - 1])?;
    Ok(stepper.solve(i, &data, kernel.values(), states)?.state)
}

/// Result of a full forward run.
#[derive(Debug, Clone)]
pub struct ForwardRun {
    pub trajectory: Trajectory,
    pub kernel: KernelSeries,
    /// `M_0..M_n`
    pub measurements: Vec<f64>,
    /// Balance residual per step `1..=n`.
    pub residuals: Vec<f64>,
}

pub fn simulate(
    spec: &ProblemSpec,
    grid: &Arc<SpatialGrid>,
    time: &TimeGrid,
    kernel: &KernelSeries,
) -> Result<ForwardRun, ForwardError> {
    if kernel.len() != time.steps() + 1 {
        return Err(ForwardError::KernelLength {
            expected: time.steps() + 1,
            found: kernel.len(),
        });
    }
    let stepper = Stepper::new(spec, grid.clone(), *time);
    let mut states = Vec::with_capacity(time.steps() + 1);
    states.push(spec.initial_field(grid)?);
    let mut residuals = Vec::with_capacity(time.steps());
    for i in 1..=time.steps() {
        let data = stepper.data(i, &states[i - 1])?;
        let out = stepper.solve(i, &data, kernel.values(), &states)?;
        residuals.push(out.residual);
        states.push(out.state);
    }
    let trajectory = Trajectory::new(*time, states);
    Ok(ForwardRun {
        measurements: trajectory.measurements(),
        trajectory,
        kernel: kernel.clone(),
        residuals,
    })
}

/// Synthetic measurement `M_i = (u_i, 1)` from a forward run on `grid` and
/// `time`, restricted to `coarse_steps` steps by index subsampling.
pub fn generate_measurement(
    spec: &ProblemSpec,
    grid: &Arc<SpatialGrid>,
    time: &TimeGrid,
    kernel: &KernelSeries,
    derivative: DerivativeSource,
    coarse_steps: usize,
) -> Result<MeasurementSeries, ForwardError> {
    if coarse_steps == 0 || !time.steps().is_multiple_of(coarse_steps) {
        return Err(ProblemError::Measurement(format!(
            "cannot resample {} steps onto {coarse_steps} steps",
            time.steps()
        ))
        .into());
    }
    let coarse = TimeGrid::new(time.horizon(), coarse_steps)?;
    let run = simulate(spec, grid, time, kernel)?;
    let factor = time.steps() / coarse_steps;
    let values: Vec<f64> = run.measurements.iter().step_by(factor).copied().collect();
    let series = MeasurementSeries::from_samples(values, coarse.tau())?;
    match (derivative, &spec.measurement_rate_exact) {
        (DerivativeSource::Analytic, Some(rate)) => Ok(series.with_analytic_rates(rate, &coarse)?),
        _ => Ok(series),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::problem::{preset_manufactured_1d, preset_zero};

    fn ones(grid: &Arc<SpatialGrid>) -> GridFunction {
        GridFunction::constant(grid.clone(), 1.0)
    }

    #[test]
    fn quadrature_single_term() {
        let g = SpatialGrid::interval(1.0, 4).unwrap();
        let u0 = GridFunction::sample(g.clone(), |x, _| Ok::<_, ()>(x + 1.0)).unwrap();
        let c = convolution_quadrature(&[9.0, 2.0], std::slice::from_ref(&u0), 1, 0.1).unwrap();
        for (a, b) in c.values().iter().zip(u0.values()) {
            assert!((a - 0.2 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn quadrature_sums() {
        let g = SpatialGrid::interval(1.0, 4).unwrap();
        let states = vec![ones(&g); 3];
        let c = convolution_quadrature(&[1.0; 4], &states, 3, 0.1).unwrap();
        assert!(c.values().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let c = convolution_quadrature(&[1.0, -1.0, 1.0], &states, 2, 0.5).unwrap();
        assert!(c.values().iter().all(|v| *v == 0.0));
        assert!(convolution_quadrature(&[1.0; 4], &states, 0, 0.1).is_err());
        assert!(convolution_quadrature(&[1.0; 2], &states, 2, 0.1).is_err());
    }

    #[test]
    fn constants_are_steady() {
        let mut spec = preset_zero();
        spec.h = parse("0").unwrap();
        spec.u0 = parse("2.5").unwrap();
        let tg = TimeGrid::new(1.0, 10).unwrap();
        let grid = spec.grid(8, None).unwrap();
        let kernel = KernelSeries::new(vec![0.0; 11]).unwrap();
        let run = simulate(&spec, &grid, &tg, &kernel).unwrap();
        for u in run.trajectory.states() {
            assert!(u.values().iter().all(|v| (v - 2.5).abs() < 1e-13));
        }
    }

    #[test]
    fn zero_data_gives_zero_measurement() {
        let spec = preset_zero();
        let tg = TimeGrid::new(1.0, 8).unwrap();
        let grid = spec.grid(16, None).unwrap();
        let kernel = KernelSeries::from_exact(&spec, &tg).unwrap();
        let m = generate_measurement(&spec, &grid, &tg, &kernel, DerivativeSource::Discrete, 8).unwrap();
        assert!(m.values().iter().all(|v| *v == 0.0));
        assert!(generate_measurement(&spec, &grid, &tg, &kernel, DerivativeSource::Discrete, 3).is_err());
    }

    #[test]
    fn resample_divisibility() {
        let spec = preset_zero();
        let tg = TimeGrid::new(1.0, 100).unwrap();
        let grid = spec.grid(4, None).unwrap();
        let kernel = KernelSeries::from_exact(&spec, &tg).unwrap();
        assert!(generate_measurement(&spec, &grid, &tg, &kernel, DerivativeSource::Discrete, 33).is_err());
    }

    #[test]
    fn grid_needs_two_nodes() {
        let spec = preset_manufactured_1d();
        assert!(spec.grid(0, None).is_err());
    }

    fn manufactured_error(n: usize, mx: usize) -> f64 {
        let spec = preset_manufactured_1d();
        let tg = TimeGrid::new(1.0, n).unwrap();
        let grid = spec.grid(mx, None).unwrap();
        let kernel = KernelSeries::from_exact(&spec, &tg).unwrap();
        let run = simulate(&spec, &grid, &tg, &kernel).unwrap();
        let exact = spec.exact_field(&grid, 1.0).unwrap().unwrap();
        run.trajectory
            .last()
            .values()
            .iter()
            .zip(exact.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    #[test]
    fn manufactured_first_order_in_time() {
        let e1 = manufactured_error(20, 400);
        let e2 = manufactured_error(40, 400);
        let e3 = manufactured_error(80, 400);
        let r1 = (e1 / e2).log2();
        let r2 = (e2 / e3).log2();
        assert!((0.8..1.2).contains(&r1), "{e1} {e2} {r1}");
        assert!((0.8..1.2).contains(&r2), "{e2} {e3} {r2}");
    }

    #[test]
    fn manufactured_second_order_in_space() {
        // τ small enough that the spatial error dominates on the coarse grids
        let e1 = manufactured_error(4000, 5);
        let e2 = manufactured_error(4000, 10);
        let r = (e1 / e2).log2();
        assert!((1.7..2.3).contains(&r), "{e1} {e2} {r}");
    }

    #[test]
    fn measurement_balance_holds_each_step() {
        let spec = preset_manufactured_1d();
        let tg = TimeGrid::new(1.0, 50).unwrap();
        let grid = spec.grid(64, None).unwrap();
        let kernel = KernelSeries::from_exact(&spec, &tg).unwrap();
        let run = simulate(&spec, &grid, &tg, &kernel).unwrap();
        assert!(run.residuals.iter().all(|r| *r <= 1e-9), "{:?}", run.residuals);
        let mut two_d = spec.clone();
        two_d.domain.ly = Some(0.5);
        two_d.g = parse("0.3*x - y*t").unwrap();
        let grid = two_d.grid(12, Some(7)).unwrap();
        let run = simulate(&two_d, &grid, &TimeGrid::new(1.0, 10).unwrap(), &kernel.subsample(5)).unwrap();
        assert!(run.residuals.iter().all(|r| *r <= 1e-9), "{:?}", run.residuals);
    }

    #[test]
    fn manufactured_measurement_tracks_exact() {
        let spec = preset_manufactured_1d();
        let tg = TimeGrid::new(1.0, 400).unwrap();
        let grid = spec.grid(100, None).unwrap();
        let kernel = KernelSeries::from_exact(&spec, &tg).unwrap();
        let m = generate_measurement(&spec, &grid, &tg, &kernel, DerivativeSource::Discrete, 100).unwrap();
        for i in 0..=100 {
            assert!((m.value(i) - (1.0 + i as f64 / 100.0)).abs() < 5e-3);
        }
    }

    #[test]
    fn stability_under_refinement() {
        let spec = preset_manufactured_1d();
        let grid = spec.grid(50, None).unwrap();
        let peak = |n| {
            let tg = TimeGrid::new(1.0, n).unwrap();
            let kernel = KernelSeries::from_exact(&spec, &tg).unwrap();
            let run = simulate(&spec, &grid, &tg, &kernel).unwrap();
            run.trajectory.states().iter().map(|u| u.norm_sq()).fold(0.0, f64::max)
        };
        let coarse = peak(25);
        let fine = peak(50);
        assert!(fine <= coarse * 1.01, "{coarse} {fine}");
    }
}
