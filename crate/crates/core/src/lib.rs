//! Recovery of an unknown time-convolution kernel `K(t)` in the semilinear
//! parabolic problem
//!
//! ```text
//! ∂_t u - Δu + K(t) h + (K * u)(t) = f(x, t, u, ∇u)   in Ω x (0, T)
//! -∇u · ν = g                                          on Γ x (0, T)
//! u(·, 0) = u0
//! ```
//!
//! from the integral measurement `m(t) = ∫_Ω u(x, t) dx`, by a decoupled
//! backward-Euler scheme: at each time step the kernel value is obtained
//! from a scalar balance first, then the field from an elliptic problem.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod expr;
pub mod forward;
pub mod grid;
pub mod harness;
pub mod inverse;
pub mod problem;
pub mod solver;

pub use expr::{parse, Env, Expr, Var};
pub use forward::{simulate, KernelSeries, Trajectory};
pub use grid::{GridFunction, SpatialGrid};
pub use inverse::{reconstruct, Diagnostics, ReconstructOptions, ReconstructionResult};
pub use problem::{load_problem, MeasurementSeries, ProblemSpec, TimeGrid};

/// Seventeen significant digits, the CSV number format.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}
