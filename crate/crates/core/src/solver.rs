//! Linear solvers for the backward-Euler elliptic step `(s M + A) u = b`,
//! with `M` the lumped mass and `A` the stiffness matrix.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{GridFunction, SpatialGrid};

/// Relative residual used for the iterative path unless overridden.
pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("zero pivot at row {0}")]
    Singular(usize),
    #[error("inconsistent system dimensions")]
    Dimension,
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

/// Thomas algorithm. `lower[k]` couples rows `k+1, k`; `upper[k]` couples `k, k+1`.
pub fn solve_tridiagonal(
    diag: &[f64],
    lower: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let n = diag.len();
    if rhs.len() != n || lower.len() + 1 != n.max(1) || upper.len() + 1 != n.max(1) {
        return Err(SolverError::Dimension);
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot == 0.0 {
        return Err(SolverError::Singular(0));
    }
    if n > 1 {
        c[0] = upper[0] / pivot;
    }
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i - 1] * c[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(SolverError::Singular(i));
        }
        if i < n - 1 {
            c[i] = upper[i] / pivot;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// `shift * M + stiffness * A` on a grid.
#[derive(Debug, Clone)]
pub enum SpdOperator {
    Tridiagonal {
        diag: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    MatrixFree {
        grid: Arc<SpatialGrid>,
        shift: f64,
        stiffness: f64,
    },
}

impl SpdOperator {
    /// Backward-Euler operator `(1/tau) M + A`; tridiagonal on 1D grids.
    pub fn backward_euler(grid: &Arc<SpatialGrid>, tau: f64) -> Self {
        if grid.dim() == 1 {
            Self::tridiagonal(grid, 1.0 / tau, 1.0)
        } else {
            SpdOperator::MatrixFree {
                grid: grid.clone(),
                shift: 1.0 / tau,
                stiffness: 1.0,
            }
        }
    }

    /// Explicit coefficient arrays of `shift * M + stiffness * A` on an interval.
    pub fn tridiagonal(grid: &SpatialGrid, shift: f64, stiffness: f64) -> Self {
        assert_eq!(grid.dim(), 1, "tridiagonal form exists only in 1D");
        let h = grid.spacing()[0];
        let stiff_diag = grid.stiffness_diagonal();
        let diag = grid
            .weights()
            .iter()
            .zip(&stiff_diag)
            .map(|(w, a)| shift * w + stiffness * a)
            .collect();
        let off = vec![-stiffness / h; grid.node_count() - 1];
        SpdOperator::Tridiagonal {
            diag,
            lower: off.clone(),
            upper: off,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SpdOperator::Tridiagonal { diag, .. } => diag.len(),
            SpdOperator::MatrixFree { grid, .. } => grid.node_count(),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SpdOperator::Tridiagonal { diag, lower, upper } => {
                let n = diag.len();
                for i in 0..n {
                    let mut s = diag[i] * x[i];
                    if i > 0 {
                        s += lower[i - 1] * x[i - 1];
                    }
                    if i + 1 < n {
                        s += upper[i] * x[i + 1];
                    }
                    out[i] = s;
                }
            }
            SpdOperator::MatrixFree {
                grid,
                shift,
                stiffness,
            } => {
                grid.stiffness_action(x, out);
                for ((o, w), xi) in out.iter_mut().zip(grid.weights()).zip(x) {
                    *o = shift * w * xi + stiffness * *o;
                }
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            SpdOperator::Tridiagonal { diag, .. } => diag.clone(),
            SpdOperator::MatrixFree {
                grid,
                shift,
                stiffness,
            } => grid
                .weights()
                .iter()
                .zip(grid.stiffness_diagonal())
                .map(|(w, a)| shift * w + stiffness * a)
                .collect(),
        }
    }

    /// Direct solve when the operator is tridiagonal, Jacobi-CG otherwise.
    pub fn solve(&self, rhs: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, SolverError> {
        match self {
            SpdOperator::Tridiagonal { diag, lower, upper } => {
                solve_tridiagonal(diag, lower, upper, rhs)
            }
            SpdOperator::MatrixFree { .. } => Ok(cg(self, rhs, tol, max_iter)?.solution),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Jacobi-preconditioned conjugate gradient from a zero initial guess.
/// Stops when `|b - A x| <= tol * |b|`.
pub fn cg(op: &SpdOperator, rhs: &[f64], tol: f64, max_iter: usize) -> Result<CgOutcome, SolverError> {
    cg_observed(op, rhs, tol, max_iter, |_| {})
}

fn cg_observed(
    op: &SpdOperator,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
    mut observe: impl FnMut(&[f64]),
) -> Result<CgOutcome, SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::BadTolerance(tol));
    }
    let n = op.dim();
    if rhs.len() != n {
        return Err(SolverError::Dimension);
    }
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let bnorm = norm(rhs);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(CgOutcome {
            solution: x,
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        observe(&x);
        rel = norm(&r) / bnorm;
        if rel <= tol {
            return Ok(CgOutcome {
                solution: x,
                iterations: it,
                residual: rel,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SolverError::IterationLimit {
        iterations: max_iter,
        residual: rel,
    })
}

/// Solve `op u = rhs` for a load vector stored as a grid function.
pub fn solve_cg(
    op: &SpdOperator,
    rhs: &GridFunction,
    tol: f64,
    max_iter: usize,
) -> Result<GridFunction, SolverError> {
    let out = cg(op, rhs.values(), tol, max_iter)?;
    Ok(GridFunction::from_vec_unchecked(rhs.grid().clone(), out.solution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn thomas_identity() {
        let b = [1.0, -2.0, 3.5, 0.25];
        let x = solve_tridiagonal(&[1.0; 4], &[0.0; 3], &[0.0; 3], &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn thomas_two_by_two() {
        // oracle: Cramer on [[2,-1],[-1,2]] gives det 3, x = (2/3, 1/3)
        let x = solve_tridiagonal(&[2.0, 2.0], &[-1.0], &[-1.0], &[1.0, 0.0]).unwrap();
        assert!((x[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((x[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn thomas_errors() {
        assert_eq!(
            solve_tridiagonal(&[0.0, 1.0], &[1.0], &[1.0], &[1.0, 1.0]),
            Err(SolverError::Singular(0))
        );
        assert_eq!(
            solve_tridiagonal(&[1.0, 1.0], &[1.0], &[1.0], &[1.0, 1.0]),
            Err(SolverError::Singular(1))
        );
        assert_eq!(
            solve_tridiagonal(&[1.0, 1.0], &[], &[1.0], &[1.0, 1.0]),
            Err(SolverError::Dimension)
        );
    }

    /// Dense Gaussian elimination with partial pivoting, test oracle only.
    #[allow(clippy::needless_range_loop)]
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, p);
            b.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    #[test]
    fn cg_on_mass_is_one_jacobi_step() {
        let g = SpatialGrid::rectangle(1.0, 1.0, 4, 3).unwrap();
        let op = SpdOperator::MatrixFree {
            grid: g.clone(),
            shift: 1.0,
            stiffness: 0.0,
        };
        let rhs: Vec<f64> = (0..g.node_count()).map(|j| (j as f64).sin() + 2.0).collect();
        let out = cg(&op, &rhs, 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 1);
        for ((x, b), w) in out.solution.iter().zip(&rhs).zip(g.weights()) {
            assert!((x - b / w).abs() < 1e-12 * (b / w).abs());
        }
    }

    #[test]
    fn cg_agrees_with_thomas_in_1d() {
        let g = SpatialGrid::interval(1.0, 150).unwrap();
        let tri = SpdOperator::tridiagonal(&g, 100.0, 1.0);
        let free = SpdOperator::MatrixFree {
            grid: g.clone(),
            shift: 100.0,
            stiffness: 1.0,
        };
        let rhs: Vec<f64> = (0..g.node_count()).map(|j| (0.1 * j as f64).cos()).collect();
        let a = tri.solve(&rhs, DEFAULT_TOL, 1000).unwrap();
        let b = cg(&free, &rhs, 1e-12, 5000).unwrap().solution;
        let diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff <= 1e-8, "{diff}");
    }

    #[test]
    fn cg_hits_iteration_limit() {
        let g = SpatialGrid::rectangle(1.0, 1.0, 30, 30).unwrap();
        let op = SpdOperator::MatrixFree {
            grid: g.clone(),
            shift: 1e-3,
            stiffness: 1.0,
        };
        let rhs: Vec<f64> = (0..g.node_count()).map(|j| ((j * 7919) % 13) as f64 - 6.0).collect();
        match cg(&op, &rhs, 1e-12, 2) {
            Err(SolverError::IterationLimit { iterations: 2, residual }) => assert!(residual > 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(cg(&op, &rhs, 0.0, 2), Err(SolverError::BadTolerance(_))));
    }

    proptest! {
        #[test]
        fn thomas_matches_dense(
            d in prop::collection::vec(3.0f64..5.0, 8),
            l in prop::collection::vec(-1.0f64..1.0, 7),
            u in prop::collection::vec(-1.0f64..1.0, 7),
            b in prop::collection::vec(-10.0f64..10.0, 8),
        ) {
            let x = solve_tridiagonal(&d, &l, &u, &b).unwrap();
            let mut a = vec![vec![0.0; 8]; 8];
            for i in 0..8 {
                a[i][i] = d[i];
                if i > 0 { a[i][i - 1] = l[i - 1]; }
                if i < 7 { a[i][i + 1] = u[i]; }
            }
            let y = dense_solve(a.clone(), b.clone());
            for i in 0..8 {
                prop_assert!((x[i] - y[i]).abs() <= 1e-10 * (1.0 + y[i].abs()));
                let r: f64 = (0..8).map(|j| a[i][j] * x[j]).sum::<f64>() - b[i];
                prop_assert!(r.abs() <= 1e-10 * (b.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0));
            }
        }

        /// Energy functional J(x) = x·Ax/2 - b·x never increases along CG iterates.
        #[test]
        fn cg_energy_decreases(seed in prop::collection::vec(-1.0f64..1.0, 36), shift in 0.1f64..10.0) {
            let g = SpatialGrid::rectangle(1.0, 1.0, 5, 5).unwrap();
            let op = SpdOperator::MatrixFree { grid: g.clone(), shift, stiffness: 1.0 };
            let energy = |x: &[f64]| {
                let mut ax = vec![0.0; x.len()];
                op.apply(x, &mut ax);
                0.5 * x.iter().zip(&ax).map(|(a, b)| a * b).sum::<f64>()
                    - x.iter().zip(&seed).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut energies = vec![0.0];
            let _ = cg_observed(&op, &seed, 1e-300, 30, |x| energies.push(energy(x)));
            for w in energies.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            }
        }
    }
}
