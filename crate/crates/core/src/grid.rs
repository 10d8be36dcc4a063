//! Uniform spatial grids on an interval or an axis-aligned rectangle with
//! lumped-mass P1 (1D) / Q1 (2D) quadrature.
//!
//! Nodes are numbered `ix + iy * (mx + 1)`. The stiffness action is
//! assembled element by element from coordinate differences, so any
//! constant field is mapped to exactly zero.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("extent must be positive and finite, got {0}")]
    BadExtent(f64),
    #[error("at least one cell per dimension is required, got {0}")]
    TooFewCells(usize),
    #[error("grid functions live on different grids")]
    Mismatch,
    #[error("expected {expected} values, got {found}")]
    Length { expected: usize, found: usize },
    #[error("non-finite value at node {0}")]
    NonFinite(usize),
}

/// Uniform grid on `(0, lx)` or `(0, lx) x (0, ly)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    dim: usize,
    extents: [f64; 2],
    cells: [usize; 2],
    spacing: [f64; 2],
    weights: Vec<f64>,
    boundary_nodes: Vec<usize>,
    boundary_weights: Vec<f64>,
}

impl SpatialGrid {
    pub fn interval(lx: f64, mx: usize) -> Result<Arc<Self>, GridError> {
        check_extent(lx)?;
        if mx < 1 {
            return Err(GridError::TooFewCells(mx));
        }
        let hx = lx / mx as f64;
        let mut weights = vec![hx; mx + 1];
        weights[0] = hx / 2.0;
        weights[mx] = hx / 2.0;
        Ok(Arc::new(SpatialGrid {
            dim: 1,
            extents: [lx, 0.0],
            cells: [mx, 0],
            spacing: [hx, 0.0],
            weights,
            boundary_nodes: vec![0, mx],
            boundary_weights: vec![1.0, 1.0],
        }))
    }

    pub fn rectangle(lx: f64, ly: f64, mx: usize, my: usize) -> Result<Arc<Self>, GridError> {
        check_extent(lx)?;
        check_extent(ly)?;
        for m in [mx, my] {
            if m < 1 {
                return Err(GridError::TooFewCells(m));
            }
        }
        let hx = lx / mx as f64;
        let hy = ly / my as f64;
        let nx = mx + 1;
        let ny = my + 1;
        let trap = |i: usize, m: usize, h: f64| if i == 0 || i == m { h / 2.0 } else { h };
        let mut weights = Vec::with_capacity(nx * ny);
        let mut boundary_nodes = Vec::new();
        let mut boundary_weights = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                weights.push(trap(ix, mx, hx) * trap(iy, my, hy));
                // each incident edge contributes its own trapezoid weight
                let mut b = 0.0;
                if iy == 0 || iy == my {
                    b += trap(ix, mx, hx);
                }
                if ix == 0 || ix == mx {
                    b += trap(iy, my, hy);
                }
                if b > 0.0 {
                    boundary_nodes.push(ix + iy * nx);
                    boundary_weights.push(b);
                }
            }
        }
        Ok(Arc::new(SpatialGrid {
            dim: 2,
            extents: [lx, ly],
            cells: [mx, my],
            spacing: [hx, hy],
            weights,
            boundary_nodes,
            boundary_weights,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents[..self.dim]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.dim]
    }

    pub fn node_count(&self) -> usize {
        self.weights.len()
    }

    /// Measure of the domain.
    pub fn volume(&self) -> f64 {
        self.extents().iter().product()
    }

    /// Measure of the boundary (2 endpoints in 1D, the perimeter in 2D).
    pub fn perimeter(&self) -> f64 {
        match self.dim {
            1 => 2.0,
            _ => 2.0 * (self.extents[0] + self.extents[1]),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn boundary_weights(&self) -> &[f64] {
        &self.boundary_weights
    }

    pub fn coord(&self, j: usize) -> (f64, f64) {
        let nx = self.cells[0] + 1;
        let (ix, iy) = (j % nx, j / nx);
        (ix as f64 * self.spacing[0], iy as f64 * self.spacing[1])
    }

    /// Unweighted stiffness action `A u`, where `A_jk = sum_e ∫ ∇φ_j·∇φ_k`.
    pub fn stiffness_action(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.node_count());
        out.iter_mut().for_each(|r| *r = 0.0);
        let [hx, hy] = self.spacing;
        match self.dim {
            1 => {
                for j in 0..self.cells[0] {
                    let d = (u[j] - u[j + 1]) / hx;
                    out[j] += d;
                    out[j + 1] -= d;
                }
            }
            _ => {
                let nx = self.cells[0] + 1;
                // consistent 1D mass matrices, scaled: [[2,1],[1,2]] * h/6
                let mx_ = [[hx / 3.0, hx / 6.0], [hx / 6.0, hx / 3.0]];
                let my_ = [[hy / 3.0, hy / 6.0], [hy / 6.0, hy / 3.0]];
                for ey in 0..self.cells[1] {
                    for ex in 0..self.cells[0] {
                        let base = ex + ey * nx;
                        let idx = [[base, base + nx], [base + 1, base + 1 + nx]];
                        let val = |a: usize, b: usize| u[idx[a][b]];
                        // x-differences along each horizontal edge, y-differences along each vertical edge
                        let dx = [(val(0, 0) - val(1, 0)) / hx, (val(0, 1) - val(1, 1)) / hx];
                        let dy = [(val(0, 0) - val(0, 1)) / hy, (val(1, 0) - val(1, 1)) / hy];
                        for a in 0..2 {
                            for b in 0..2 {
                                let sa = if a == 0 { 1.0 } else { -1.0 };
                                let sb = if b == 0 { 1.0 } else { -1.0 };
                                let xpart = sa * (my_[b][0] * dx[0] + my_[b][1] * dx[1]);
                                let ypart = sb * (mx_[a][0] * dy[0] + mx_[a][1] * dy[1]);
                                out[idx[a][b]] += xpart + ypart;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Diagonal of the unweighted stiffness matrix.
    pub fn stiffness_diagonal(&self) -> Vec<f64> {
        let [hx, hy] = self.spacing;
        let mut diag = vec![0.0; self.node_count()];
        match self.dim {
            1 => {
                for j in 0..self.cells[0] {
                    diag[j] += 1.0 / hx;
                    diag[j + 1] += 1.0 / hx;
                }
            }
            _ => {
                let nx = self.cells[0] + 1;
                let local = hy / (3.0 * hx) + hx / (3.0 * hy);
                for ey in 0..self.cells[1] {
                    for ex in 0..self.cells[0] {
                        let base = ex + ey * nx;
                        for j in [base, base + 1, base + nx, base + nx + 1] {
                            diag[j] += local;
                        }
                    }
                }
            }
        }
        diag
    }
}

fn check_extent(l: f64) -> Result<(), GridError> {
    if l.is_finite() && l > 0.0 {
        Ok(())
    } else {
        Err(GridError::BadExtent(l))
    }
}

/// One real value per grid node.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<SpatialGrid>,
    values: Vec<f64>,
}

impl PartialEq for GridFunction {
    fn eq(&self, other: &Self) -> bool {
        same_grid(&self.grid, &other.grid) && self.values == other.values
    }
}

fn same_grid(a: &Arc<SpatialGrid>, b: &Arc<SpatialGrid>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

impl GridFunction {
    pub fn new(grid: Arc<SpatialGrid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.node_count() {
            return Err(GridError::Length {
                expected: grid.node_count(),
                found: values.len(),
            });
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(j));
        }
        Ok(GridFunction { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: Arc<SpatialGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        GridFunction { grid, values }
    }

    pub fn constant(grid: Arc<SpatialGrid>, c: f64) -> Self {
        let n = grid.node_count();
        GridFunction {
            grid,
            values: vec![c; n],
        }
    }

    /// Sample a function of the node coordinates.
    pub fn sample<E>(
        grid: Arc<SpatialGrid>,
        mut f: impl FnMut(f64, f64) -> Result<f64, E>,
    ) -> Result<Self, E> {
        let values = (0..grid.node_count())
            .map(|j| {
                let (x, y) = grid.coord(j);
                f(x, y)
            })
            .collect::<Result<Vec<_>, E>>()?;
        Ok(GridFunction { grid, values })
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn check_same(&self, other: &GridFunction) -> Result<(), GridError> {
        if same_grid(&self.grid, &other.grid) {
            Ok(())
        } else {
            Err(GridError::Mismatch)
        }
    }

    /// Lumped-mass L2 product `sum_j w_j u_j v_j`.
    pub fn inner(&self, other: &GridFunction) -> Result<f64, GridError> {
        self.check_same(other)?;
        Ok(self
            .grid
            .weights
            .iter()
            .zip(&self.values)
            .zip(&other.values)
            .map(|((w, a), b)| w * a * b)
            .sum())
    }

    /// `(u, 1)`.
    pub fn integral(&self) -> f64 {
        self.grid
            .weights
            .iter()
            .zip(&self.values)
            .map(|(w, a)| w * a)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.grid
            .weights
            .iter()
            .zip(&self.values)
            .map(|(w, a)| w * a * a)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `sum_b b_j g_j v_j`; `g` is ordered like [`SpatialGrid::boundary_nodes`].
    pub fn boundary_inner(&self, g: &[f64]) -> Result<f64, GridError> {
        let nb = self.grid.boundary_nodes.len();
        if g.len() != nb {
            return Err(GridError::Length {
                expected: nb,
                found: g.len(),
            });
        }
        Ok(self
            .grid
            .boundary_nodes
            .iter()
            .zip(&self.grid.boundary_weights)
            .zip(g)
            .map(|((&j, b), gj)| b * gj * self.values[j])
            .sum())
    }

    /// Nodal representative `r` of the stiffness form: `(r, v) = a(u, v)`.
    pub fn stiffness_apply(&self) -> GridFunction {
        let mut out = vec![0.0; self.values.len()];
        self.grid.stiffness_action(&self.values, &mut out);
        for (r, w) in out.iter_mut().zip(&self.grid.weights) {
            *r /= w;
        }
        GridFunction::from_vec_unchecked(self.grid.clone(), out)
    }

    /// `a(u, u) = |u|_{H1}^2` of the interpolant.
    pub fn grad_seminorm_sq(&self) -> f64 {
        let mut out = vec![0.0; self.values.len()];
        self.grid.stiffness_action(&self.values, &mut out);
        out.iter().zip(&self.values).map(|(r, u)| r * u).sum()
    }

    /// Central differences inside, one-sided second-order differences on the
    /// boundary (first-order when a line has only two nodes).
    pub fn nodal_gradient(&self) -> Vec<GridFunction> {
        let g = &self.grid;
        let nx = g.cells[0] + 1;
        let ny = if g.dim == 2 { g.cells[1] + 1 } else { 1 };
        let mut parts = Vec::with_capacity(g.dim);
        for axis in 0..g.dim {
            let (len, stride, lines, line_stride) = if axis == 0 {
                (nx, 1, ny, nx)
            } else {
                (ny, nx, nx, 1)
            };
            let h = g.spacing[axis];
            let mut d = vec![0.0; self.values.len()];
            for line in 0..lines {
                let at = |k: usize| line * line_stride + k * stride;
                let v = |k: usize| self.values[at(k)];
                differentiate_line(len, h, v, |k, val| d[at(k)] = val);
            }
            parts.push(GridFunction::from_vec_unchecked(g.clone(), d));
        }
        parts
    }

    pub fn axpy(&mut self, a: f64, x: &GridFunction) {
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

fn differentiate_line(
    len: usize,
    h: f64,
    v: impl Fn(usize) -> f64,
    mut set: impl FnMut(usize, f64),
) {
    if len == 2 {
        let d = (v(1) - v(0)) / h;
        set(0, d);
        set(1, d);
        return;
    }
    set(0, (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h));
    for k in 1..len - 1 {
        set(k, (v(k + 1) - v(k - 1)) / (2.0 * h));
    }
    let n = len - 1;
    set(n, (3.0 * v(n) - 4.0 * v(n - 1) + v(n - 2)) / (2.0 * h));
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sample1d(g: &Arc<SpatialGrid>, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction::sample(g.clone(), |x, _| Ok::<_, ()>(f(x))).unwrap()
    }

    fn sample2d(g: &Arc<SpatialGrid>, f: impl Fn(f64, f64) -> f64) -> GridFunction {
        GridFunction::sample(g.clone(), |x, y| Ok::<_, ()>(f(x, y))).unwrap()
    }

    #[test]
    fn weights_sum_to_measure() {
        let g = SpatialGrid::interval(2.5, 7).unwrap();
        assert_relative_eq!(g.weights().iter().sum::<f64>(), 2.5, max_relative = 1e-12);
        assert_relative_eq!(g.boundary_weights().iter().sum::<f64>(), 2.0, max_relative = 1e-12);
        let g = SpatialGrid::rectangle(2.0, 0.5, 5, 3).unwrap();
        assert_relative_eq!(g.weights().iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(g.boundary_weights().iter().sum::<f64>(), 5.0, max_relative = 1e-12);
        assert!(g.weights().iter().all(|w| *w > 0.0));
        assert_eq!(g.boundary_nodes().len(), 2 * 6 + 2 * 2);
    }

    #[test]
    fn construction_errors() {
        assert!(SpatialGrid::interval(1.0, 0).is_err());
        assert!(SpatialGrid::interval(-1.0, 4).is_err());
        assert!(SpatialGrid::rectangle(1.0, f64::NAN, 4, 4).is_err());
    }

    #[test]
    fn inner_products() {
        let g = SpatialGrid::interval(1.0, 10).unwrap();
        let one = GridFunction::constant(g.clone(), 1.0);
        assert_relative_eq!(one.inner(&one).unwrap(), 1.0, max_relative = 1e-14);
        for m in [1, 3, 10, 17] {
            let g = SpatialGrid::interval(1.0, m).unwrap();
            let x = sample1d(&g, |x| x);
            let one = GridFunction::constant(g.clone(), 1.0);
            assert_relative_eq!(x.inner(&one).unwrap(), 0.5, max_relative = 1e-14);
        }
        let g = SpatialGrid::interval(1.0, 100).unwrap();
        let c = sample1d(&g, |x| (PI * x).cos());
        assert!(c.integral().abs() < 1e-4);
    }

    #[test]
    fn inner_rejects_grid_mismatch() {
        let a = GridFunction::constant(SpatialGrid::interval(1.0, 4).unwrap(), 1.0);
        let b = GridFunction::constant(SpatialGrid::interval(1.0, 5).unwrap(), 1.0);
        assert_eq!(a.inner(&b), Err(GridError::Mismatch));
    }

    #[test]
    fn boundary_inner_cases() {
        let g = SpatialGrid::interval(1.0, 8).unwrap();
        let one = GridFunction::constant(g.clone(), 1.0);
        assert_eq!(one.boundary_inner(&[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(one.boundary_inner(&[3.0, -3.0]).unwrap(), 0.0);
        assert!(one.boundary_inner(&[1.0]).is_err());
        let g = SpatialGrid::rectangle(1.0, 1.0, 4, 4).unwrap();
        let one = GridFunction::constant(g.clone(), 1.0);
        let gv = vec![1.0; g.boundary_nodes().len()];
        assert_relative_eq!(one.boundary_inner(&gv).unwrap(), 4.0, max_relative = 1e-12);
    }

    #[test]
    fn stiffness_kills_constants_exactly() {
        for g in [
            SpatialGrid::interval(1.3, 9).unwrap(),
            SpatialGrid::rectangle(1.0, 0.7, 6, 5).unwrap(),
        ] {
            let c = GridFunction::constant(g.clone(), 3.7);
            assert!(c.stiffness_apply().values().iter().all(|r| *r == 0.0));
            assert_eq!(c.grad_seminorm_sq(), 0.0);
            assert_eq!(GridFunction::constant(g, 5.0).grad_seminorm_sq(), 0.0);
        }
    }

    #[test]
    fn stiffness_exact_for_linears() {
        let g = SpatialGrid::interval(1.0, 13).unwrap();
        let u = sample1d(&g, |x| x);
        assert_relative_eq!(u.stiffness_apply().inner(&u).unwrap(), 1.0, max_relative = 1e-12);
        let g = SpatialGrid::rectangle(1.0, 2.0, 4, 6).unwrap();
        let u = sample2d(&g, |x, y| 2.0 * x - y);
        // ∫ |(2, -1)|^2 over area 2
        assert_relative_eq!(u.grad_seminorm_sq(), 10.0, max_relative = 1e-12);
    }

    #[test]
    fn stiffness_cosine_energy() {
        let g = SpatialGrid::interval(1.0, 200).unwrap();
        let u = sample1d(&g, |x| (PI * x).cos());
        let e = u.stiffness_apply().inner(&u).unwrap();
        assert!((e - PI * PI / 2.0).abs() < 1e-3, "{e}");
        let g = SpatialGrid::rectangle(1.0, 1.0, 80, 80).unwrap();
        let u = sample2d(&g, |x, y| (PI * x).cos() * (PI * y).cos());
        // ∫∫ π² (sin² cos² + cos² sin²) = π²/2
        assert!((u.grad_seminorm_sq() - PI * PI / 2.0).abs() < 1e-2);
    }

    #[test]
    fn stiffness_diagonal_matches_action() {
        for g in [
            SpatialGrid::interval(1.0, 5).unwrap(),
            SpatialGrid::rectangle(1.0, 0.5, 3, 4).unwrap(),
        ] {
            let diag = g.stiffness_diagonal();
            let mut e = vec![0.0; g.node_count()];
            let mut out = vec![0.0; g.node_count()];
            for j in 0..g.node_count() {
                e.iter_mut().for_each(|v| *v = 0.0);
                e[j] = 1.0;
                g.stiffness_action(&e, &mut out);
                assert_relative_eq!(out[j], diag[j], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_cases() {
        let g = SpatialGrid::interval(1.0, 10).unwrap();
        let p = &sample1d(&g, |x| x).nodal_gradient()[0];
        assert!(p.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let p = &GridFunction::constant(g.clone(), 2.0).nodal_gradient()[0];
        assert!(p.values().iter().all(|v| *v == 0.0));
        let p = &sample1d(&g, |x| x * x).nodal_gradient()[0];
        assert_relative_eq!(p.values()[5], 1.0, max_relative = 1e-12);
        // one-sided second-order formulas are exact for quadratics too
        assert_relative_eq!(p.values()[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.values()[10], 2.0, max_relative = 1e-12);

        let g = SpatialGrid::rectangle(1.0, 2.0, 4, 5).unwrap();
        let pq = sample2d(&g, |x, y| 3.0 * x - 0.5 * y + x * y).nodal_gradient();
        for j in 0..g.node_count() {
            let (x, y) = g.coord(j);
            assert_relative_eq!(pq[0].values()[j], 3.0 + y, epsilon = 1e-12);
            assert_relative_eq!(pq[1].values()[j], -0.5 + x, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn stiffness_symmetric_and_semidefinite(
            u in prop::collection::vec(-1.0f64..1.0, 30),
            v in prop::collection::vec(-1.0f64..1.0, 30),
        ) {
            for g in [
                SpatialGrid::interval(1.0, 29).unwrap(),
                SpatialGrid::rectangle(1.0, 1.5, 5, 4).unwrap(),
            ] {
                let u = GridFunction::new(g.clone(), u.clone()).unwrap();
                let v = GridFunction::new(g.clone(), v.clone()).unwrap();
                let auv = u.stiffness_apply().inner(&v).unwrap();
                let avu = v.stiffness_apply().inner(&u).unwrap();
                prop_assert!((auv - avu).abs() <= 1e-12 * (auv.abs().max(avu.abs()) + 1.0));
                prop_assert!(u.grad_seminorm_sq() >= -1e-14);
                let one = GridFunction::constant(g.clone(), 1.0);
                let scale: f64 = u.values().iter().map(|x| x.abs()).sum::<f64>() * 1e3;
                prop_assert!(u.stiffness_apply().inner(&one).unwrap().abs() <= 1e-13 * scale.max(1.0));
            }
        }
    }
}
