//! Discrete Schrodinger operators `-Delta_h + V` on a Dirichlet box.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::banded::{BandedLdl, SymmetricBand};
use crate::error::{Error, Result};
use crate::grid::{axpy, Complex64, Grid, RealField};
use crate::linsolve::{pcg, PcgOptions};

/// Accuracy of the finite-difference Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilOrder {
    /// Three-point stencil, `O(h^2)`.
    Second,
    /// Five-point stencil, `O(h^4)`.
    #[default]
    Fourth,
}

impl StencilOrder {
    /// Coefficients of `-d^2/dx^2` times `h^2`: centre, first and second neighbour.
    pub fn coefficients(self) -> [f64; 3] {
        match self {
            StencilOrder::Second => [2.0, -1.0, 0.0],
            StencilOrder::Fourth => [2.5, -4.0 / 3.0, 1.0 / 12.0],
        }
    }

    pub fn half_width(self) -> usize {
        match self {
            StencilOrder::Second => 1,
            StencilOrder::Fourth => 2,
        }
    }
}

/// Matrix-free symmetric operator `-Delta_h + diag(V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    grid: Grid,
    potential: Vec<f64>,
    order: StencilOrder,
}

pub fn build_hamiltonian(grid: &Grid, potential: &RealField) -> Result<LinearOperator> {
    LinearOperator::new(grid, potential, StencilOrder::default())
}

impl LinearOperator {
    pub fn new(grid: &Grid, potential: &RealField, order: StencilOrder) -> Result<Self> {
        grid.check_same(potential.grid())?;
        if potential.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("potential has non-finite entries".into()));
        }
        Ok(Self { grid: *grid, potential: potential.values().to_vec(), order })
    }

    pub fn from_values(grid: &Grid, potential: Vec<f64>, order: StencilOrder) -> Result<Self> {
        let field = RealField::from_values(*grid, potential)?;
        Self::new(grid, &field, order)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn order(&self) -> StencilOrder {
        self.order
    }

    pub fn len(&self) -> usize {
        self.potential.len()
    }

    pub fn is_empty(&self) -> bool {
        self.potential.is_empty()
    }

    /// Same kinetic part with a different potential.
    pub fn with_potential(&self, potential: Vec<f64>) -> Result<Self> {
        Self::from_values(&self.grid, potential, self.order)
    }

    /// `out = -Delta_h u`.
    pub fn kinetic_apply(&self, u: &[f64], out: &mut [f64]) {
        kinetic_apply_generic(&self.grid, self.order, u, out);
    }

    pub fn kinetic_apply_complex(&self, u: &[Complex64], out: &mut [Complex64]) {
        kinetic_apply_generic(&self.grid, self.order, u, out);
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.kinetic_apply(u, &mut out);
        for ((o, v), x) in out.iter_mut().zip(&self.potential).zip(u) {
            *o += v * x;
        }
        out
    }

    pub fn apply_field(&self, u: &RealField) -> Result<RealField> {
        self.grid.check_same(u.grid())?;
        RealField::from_values(self.grid, self.apply(u.values()))
    }

    /// `<u, -Delta_h u>` with quadrature weight, assembled from sums of squares.
    pub fn kinetic_energy(&self, u: &[f64]) -> f64 {
        let h = self.grid.spacing();
        let n = self.grid.points_per_axis();
        let mut total = 0.0;
        for_each_line(&self.grid, |axis_start, stride| {
            let at = |i: isize| -> f64 {
                if i < 0 || i >= n as isize {
                    0.0
                } else {
                    u[axis_start + i as usize * stride]
                }
            };
            let mut grad = 0.0;
            for i in -1..n as isize {
                let d = at(i + 1) - at(i);
                grad += d * d;
            }
            let mut line = grad;
            if self.order == StencilOrder::Fourth {
                // -D2 + (h^2/12)(D2^2 + end corrections)
                let mut curv = 0.0;
                for i in 0..n as isize {
                    let c = at(i - 1) - 2.0 * at(i) + at(i + 1);
                    curv += c * c;
                }
                curv += at(0).powi(2) + at(n as isize - 1).powi(2);
                line += curv / 12.0;
            }
            total += line;
        });
        total / (h * h) * self.grid.cell_volume()
    }

    /// `<u, (-Delta_h + V) u>`.
    pub fn quadratic_form(&self, u: &[f64]) -> f64 {
        let pot: f64 = u.iter().zip(&self.potential).map(|(x, v)| v * x * x).sum();
        self.kinetic_energy(u) + pot * self.grid.cell_volume()
    }

    /// Upper bound on the spectral radius from Gershgorin discs.
    pub fn norm_estimate(&self) -> f64 {
        let [c0, c1, c2] = self.order.coefficients();
        let h = self.grid.spacing();
        let kin = self.grid.dim() as f64 * (c0 + 2.0 * c1.abs() + 2.0 * c2.abs()) / (h * h);
        let vmax = self.potential.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        kin + vmax
    }

    pub fn min_potential(&self) -> f64 {
        self.potential.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// One-dimensional band representation of `-Delta_h + V + shift`.
    pub fn bands(&self, shift: f64) -> Result<SymmetricBand<f64>> {
        if self.grid.dim() != 1 {
            return Err(Error::InvalidArgument("band form exists only in one dimension".into()));
        }
        let h2 = self.grid.spacing().powi(2);
        let n = self.len();
        let [c0, c1, c2] = self.order.coefficients();
        let mut bands = vec![
            self.potential.iter().map(|v| c0 / h2 + v + shift).collect::<Vec<f64>>(),
            vec![c1 / h2; n - 1],
        ];
        if self.order == StencilOrder::Fourth {
            bands.push(vec![c2 / h2; n - 2]);
        }
        SymmetricBand::new(bands)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e);
            for (i, v) in col.into_iter().enumerate() {
                m[(i, j)] = v;
            }
            e[j] = 0.0;
        }
        m
    }

    /// Solver for `(op - sigma) x = b`, which must be positive definite.
    pub fn shifted_solver(&self, sigma: f64) -> Result<ShiftedSolver> {
        if self.grid.dim() == 1 {
            let f = BandedLdl::factor_spd(&self.bands(-sigma)?)?;
            Ok(ShiftedSolver { op: self.clone(), sigma, banded: Some(f) })
        } else {
            if self.min_potential() - sigma <= 0.0 {
                // not a proof of indefiniteness, but CG needs a definite operator
                log::debug!("shift {sigma} not below the potential minimum; relying on kinetic part");
            }
            Ok(ShiftedSolver { op: self.clone(), sigma, banded: None })
        }
    }
}

/// Factorised or iterative inverse of a shifted operator.
#[derive(Debug, Clone)]
pub struct ShiftedSolver {
    op: LinearOperator,
    sigma: f64,
    banded: Option<BandedLdl<f64>>,
}

impl ShiftedSolver {
    pub fn shift(&self) -> f64 {
        self.sigma
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if let Some(f) = &self.banded {
            return Ok(f.solve(b));
        }
        let diag_kin = {
            let [c0, _, _] = self.op.order.coefficients();
            self.op.grid.dim() as f64 * c0 / self.op.grid.spacing().powi(2)
        };
        let inv_diag: Vec<f64> =
            self.op.potential.iter().map(|v| 1.0 / (diag_kin + v - self.sigma)).collect();
        let sigma = self.sigma;
        let op = &self.op;
        let apply = |x: &[f64]| {
            let mut y = op.apply(x);
            axpy(-sigma, x, &mut y);
            y
        };
        let precond = |r: &[f64]| r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect::<Vec<f64>>();
        let opts = PcgOptions { rel_tol: 1e-14, max_iter: 20 * b.len().max(100) };
        let out = pcg(apply, precond, |_v: &mut [f64]| {}, b, None, &opts)?;
        Ok(out.solution)
    }
}

/// Calls `f(start, stride)` for every grid line along every axis.
pub(crate) fn for_each_line(grid: &Grid, mut f: impl FnMut(usize, usize)) {
    let n = grid.points_per_axis();
    let total = grid.len();
    for axis in 0..grid.dim() {
        let stride = grid.stride(axis);
        for start in 0..total {
            if (start / stride) % n == 0 {
                f(start, stride);
            }
        }
    }
}

fn kinetic_apply_generic<T>(grid: &Grid, order: StencilOrder, u: &[T], out: &mut [T])
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let n = grid.points_per_axis();
    let h2 = grid.spacing().powi(2);
    let [c0, c1, c2] = order.coefficients();
    let (c0, c1, c2) = (c0 / h2, c1 / h2, c2 / h2);
    for o in out.iter_mut() {
        *o = T::default();
    }
    for_each_line(grid, |start, stride| {
        for i in 0..n {
            let idx = start + i * stride;
            let mut acc = u[idx] * c0;
            if i >= 1 {
                acc = acc + u[idx - stride] * c1;
            }
            if i + 1 < n {
                acc = acc + u[idx + stride] * c1;
            }
            if c2 != 0.0 {
                if i >= 2 {
                    acc = acc + u[idx - 2 * stride] * c2;
                }
                if i + 2 < n {
                    acc = acc + u[idx + 2 * stride] * c2;
                }
            }
            out[idx] = out[idx] + acc;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use std::f64::consts::PI;

    fn zero_potential(g: Grid) -> RealField {
        RealField::zeros(g)
    }

    #[test]
    fn dense_matrix_is_exactly_symmetric() {
        for order in [StencilOrder::Second, StencilOrder::Fourth] {
            let g = build_grid(2, 2.0, 8).unwrap();
            let v = RealField::from_fn(g, |x| x[0] * x[0] + 0.3 * x[1]);
            let m = LinearOperator::new(&g, &v, order).unwrap().to_dense();
            assert_eq!((&m - m.transpose()).amax(), 0.0);
        }
    }

    #[test]
    fn constant_shift_moves_spectrum() {
        let g = build_grid(1, 4.0, 32).unwrap();
        let v0 = RealField::from_fn(g, |x| x[0] * x[0]);
        let v1 = v0.map(|v| v + 2.5);
        let e0 = build_hamiltonian(&g, &v0).unwrap().to_dense().symmetric_eigenvalues();
        let e1 = build_hamiltonian(&g, &v1).unwrap().to_dense().symmetric_eigenvalues();
        let mut a: Vec<f64> = e0.iter().cloned().collect();
        let mut b: Vec<f64> = e1.iter().cloned().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 2.5).abs() < 1e-9);
        }
    }

    fn sine_error(order: StencilOrder, n: usize) -> f64 {
        let l = 1.0;
        let g = build_grid(1, l, n).unwrap();
        let k = PI / l;
        let u = RealField::from_fn(g, |x| (k * x[0]).sin());
        let op = LinearOperator::new(&g, &zero_potential(g), order).unwrap();
        let au = op.apply(u.values());
        // boundary rows see the odd extension, so compare in the interior
        let skip = n / 8;
        (skip..n - skip).map(|i| (au[i] - k * k * u.values()[i]).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn second_order_stencil_converges_at_rate_two() {
        let e1 = sine_error(StencilOrder::Second, 32);
        let e2 = sine_error(StencilOrder::Second, 64);
        assert!(((e1 / e2).log2() - 2.0).abs() < 0.1);
    }

    #[test]
    fn fourth_order_stencil_converges_at_rate_four() {
        let e1 = sine_error(StencilOrder::Fourth, 32);
        let e2 = sine_error(StencilOrder::Fourth, 64);
        assert!(((e1 / e2).log2() - 4.0).abs() < 0.2);
    }

    #[test]
    fn kinetic_energy_matches_quadratic_form() {
        for order in [StencilOrder::Second, StencilOrder::Fourth] {
            let g = build_grid(2, 3.0, 12).unwrap();
            let v = RealField::from_fn(g, |x| x[0] * x[0] + x[1] * x[1]);
            let op = LinearOperator::new(&g, &v, order).unwrap();
            let u = RealField::from_fn(g, |x| (-(x[0] - 0.3).powi(2) - x[1] * x[1]).exp() + 0.1 * x[0]);
            let direct = u.inner(&op.apply_field(&u).unwrap()).unwrap();
            assert!((op.quadratic_form(u.values()) - direct).abs() < 1e-12 * direct.abs());
        }
    }

    #[test]
    fn banded_form_matches_apply() {
        let g = build_grid(1, 4.0, 16).unwrap();
        let v = RealField::from_fn(g, |x| x[0] * x[0]);
        let op = build_hamiltonian(&g, &v).unwrap();
        let u: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = op.apply(&u);
        let b = op.bands(0.0).unwrap().mul_vec(&u);
        for i in 0..16 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_solver_inverts_in_two_dimensions() {
        let g = build_grid(2, 3.0, 16).unwrap();
        let v = RealField::from_fn(g, |x| x[0] * x[0] + x[1] * x[1]);
        let op = build_hamiltonian(&g, &v).unwrap();
        let s = op.shifted_solver(-1.0).unwrap();
        let b: Vec<f64> = (0..g.len()).map(|i| ((i * 7 % 13) as f64).cos()).collect();
        let x = s.solve(&b).unwrap();
        let mut r = op.apply(&x);
        axpy(1.0, &x, &mut r);
        let err = r.iter().zip(&b).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }
}
