//! Lowest eigenpairs of `-Delta_h + V`, optionally restricted to the
//! orthogonal complement of one vector.
//!
//! Small problems are diagonalised densely. Larger ones use shift-invert
//! subspace iteration with Rayleigh-Ritz projection; the shift sits below
//! the potential minimum so every inner solve is positive definite.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{axpy, dot, Grid, RealField};
use crate::operator::LinearOperator;

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Residual bound relative to the operator norm estimate.
    pub residual_tol: f64,
    /// Stop once Ritz vectors move less than this between sweeps.
    pub change_tol: f64,
    pub max_iter: usize,
    pub degeneracy_gap: f64,
    /// Problems with at most this many nodes are solved densely.
    pub dense_threshold: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            residual_tol: 1e-10,
            change_tol: 1e-13,
            max_iter: 2000,
            degeneracy_gap: 1e-9,
            dense_threshold: 300,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<RealField>,
    /// `||P op v - lambda v||` per pair, unit-norm vectors.
    pub residuals: Vec<f64>,
    /// Index pairs closer than the degeneracy gap.
    pub degenerate: Vec<(usize, usize)>,
    pub iterations: usize,
}

impl EigenPairs {
    fn empty() -> Self {
        Self { values: vec![], vectors: vec![], residuals: vec![], degenerate: vec![], iterations: 0 }
    }

    pub fn check_nondegenerate(&self) -> Result<()> {
        if self.degenerate.is_empty() {
            return Ok(());
        }
        let gap = self
            .degenerate
            .iter()
            .map(|&(i, j)| (self.values[i] - self.values[j]).abs())
            .fold(0.0, f64::max);
        Err(Error::Degenerate { pairs: self.degenerate.clone(), gap })
    }
}

pub fn eigensolve_lowest(op: &LinearOperator, count: usize) -> Result<EigenPairs> {
    eigensolve_with(op, None, count, &EigenOptions::default(), None)
}

/// Lowest eigenpairs of `P op P` on the complement of `deflate`.
pub fn deflated_eigensolve(op: &LinearOperator, deflate: &RealField, count: usize) -> Result<EigenPairs> {
    eigensolve_with(op, Some(deflate), count, &EigenOptions::default(), None)
}

pub fn eigensolve_with(
    op: &LinearOperator,
    deflate: Option<&RealField>,
    count: usize,
    opts: &EigenOptions,
    guess: Option<&[RealField]>,
) -> Result<EigenPairs> {
    let grid = *op.grid();
    let n = grid.len();
    let c = prepare_deflation(&grid, deflate)?;
    let available = if c.is_some() { n - 1 } else { n };
    if count > available {
        return Err(Error::InvalidArgument(format!(
            "requested {count} eigenpairs from a space of dimension {available}"
        )));
    }
    if count == 0 {
        return Ok(EigenPairs::empty());
    }
    let block = count + (count / 2).max(4);
    if n <= opts.dense_threshold || block >= available {
        return dense_solve(op, c.as_deref(), count, opts);
    }
    subspace_iteration(op, c.as_deref(), count, block, opts, guess)
}

pub fn dense_eigensolve_lowest(op: &LinearOperator, count: usize) -> Result<EigenPairs> {
    let opts = EigenOptions { dense_threshold: usize::MAX, ..Default::default() };
    eigensolve_with(op, None, count, &opts, None)
}

pub fn dense_deflated_eigensolve(op: &LinearOperator, deflate: &RealField, count: usize) -> Result<EigenPairs> {
    let opts = EigenOptions { dense_threshold: usize::MAX, ..Default::default() };
    eigensolve_with(op, Some(deflate), count, &opts, None)
}

/// Unit (unweighted) deflation direction.
fn prepare_deflation(grid: &Grid, deflate: Option<&RealField>) -> Result<Option<Vec<f64>>> {
    let Some(d) = deflate else { return Ok(None) };
    grid.check_same(d.grid())?;
    let norm = dot(d.values(), d.values()).sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument("deflation vector has zero norm".into()));
    }
    Ok(Some(d.values().iter().map(|v| v / norm).collect()))
}

fn project_out(c: Option<&[f64]>, v: &mut [f64]) {
    if let Some(c) = c {
        let s = dot(c, v);
        axpy(-s, c, v);
    }
}

fn dense_solve(op: &LinearOperator, c: Option<&[f64]>, count: usize, opts: &EigenOptions) -> Result<EigenPairs> {
    let n = op.len();
    let mut m = op.to_dense();
    if let Some(c) = c {
        let p = DMatrix::identity(n, n) - DMatrix::from_fn(n, n, |i, j| c[i] * c[j]);
        let lift = 2.0 * op.norm_estimate() + 1.0;
        m = &p * m * &p + DMatrix::from_fn(n, n, |i, j| lift * c[i] * c[j]);
        m = (&m + m.transpose()) * 0.5;
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = Vec::with_capacity(count);
    let mut cols = Vec::with_capacity(count);
    for &k in order.iter().take(count) {
        values.push(eig.eigenvalues[k]);
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().cloned().collect();
        project_out(c, &mut v);
        normalize(&mut v);
        cols.push(v);
    }
    finish(op, c, values, cols, 0, opts)
}

fn subspace_iteration(
    op: &LinearOperator,
    c: Option<&[f64]>,
    count: usize,
    block: usize,
    opts: &EigenOptions,
    guess: Option<&[RealField]>,
) -> Result<EigenPairs> {
    let grid = *op.grid();
    let sigma = op.min_potential() - 1.0;
    let solver = op.shifted_solver(sigma)?;
    let w = match c {
        Some(c) => Some(solver.solve(c)?),
        None => None,
    };
    let apply_inverse = |x: &[f64]| -> Result<Vec<f64>> {
        let mut y = solver.solve(x)?;
        if let (Some(c), Some(w)) = (c, &w) {
            let beta = dot(c, &y) / dot(c, w);
            axpy(-beta, w, &mut y);
        }
        project_out(c, &mut y);
        Ok(y)
    };

    let mut x = initial_block(&grid, c, block, guess);
    let mut values = vec![0.0; block];
    let mut hx: Vec<Vec<f64>> = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let mut y: Vec<Vec<f64>> = x.iter().map(|col| apply_inverse(col)).collect::<Result<_>>()?;
        orthonormalize(&mut y, c);
        let hy: Vec<Vec<f64>> = y
            .iter()
            .map(|v| {
                let mut r = op.apply(v);
                project_out(c, &mut r);
                r
            })
            .collect();
        let b = y.len();
        let g = DMatrix::from_fn(b, b, |i, j| 0.5 * (dot(&y[i], &hy[j]) + dot(&y[j], &hy[i])));
        let eig = SymmetricEigen::new(g);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let combine = |basis: &[Vec<f64>], k: usize| -> Vec<f64> {
            let mut out = vec![0.0; basis[0].len()];
            for (i, col) in basis.iter().enumerate() {
                axpy(eig.eigenvectors[(i, k)], col, &mut out);
            }
            out
        };
        let new_x: Vec<Vec<f64>> = order.iter().map(|&k| combine(&y, k)).collect();
        let new_hx: Vec<Vec<f64>> = order.iter().map(|&k| combine(&hy, k)).collect();
        values = order.iter().map(|&k| eig.eigenvalues[k]).collect();

        let mut change: f64 = 0.0;
        for k in 0..count.min(x.len()) {
            let s = if dot(&x[k], &new_x[k]) < 0.0 { -1.0 } else { 1.0 };
            let d: f64 = x[k].iter().zip(&new_x[k]).map(|(a, b)| (b - s * a).powi(2)).sum();
            change = change.max(d.sqrt());
        }
        x = new_x;
        hx = new_hx;
        let small_residuals = (0..count).all(|k| {
            let mut r = hx[k].clone();
            axpy(-values[k], &x[k], &mut r);
            dot(&r, &r).sqrt() <= 1e-12 * values[k].abs().max(1.0)
        });
        history.push(change);
        let stagnant = it > 40 && change < 1e-9 && {
            let recent = &history[history.len() - 10..];
            let older = &history[history.len() - 20..history.len() - 10];
            recent.iter().cloned().fold(f64::INFINITY, f64::min)
                >= 0.5 * older.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        if (it > 0 && change <= opts.change_tol) || small_residuals || stagnant {
            break;
        }
    }
    let _ = hx;
    x.truncate(count);
    values.truncate(count);
    finish(op, c, values, x, iterations, opts)
}

fn finish(
    op: &LinearOperator,
    c: Option<&[f64]>,
    values: Vec<f64>,
    mut cols: Vec<Vec<f64>>,
    iterations: usize,
    opts: &EigenOptions,
) -> Result<EigenPairs> {
    let grid = *op.grid();
    let scale = op.norm_estimate();
    let mut residuals = Vec::with_capacity(cols.len());
    for (k, v) in cols.iter_mut().enumerate() {
        fix_sign(v);
        let mut r = op.apply(v);
        project_out(c, &mut r);
        axpy(-values[k], v, &mut r);
        let res = dot(&r, &r).sqrt();
        if res > opts.residual_tol * scale {
            return Err(Error::EigenConvergence { residual: res, tolerance: opts.residual_tol * scale });
        }
        residuals.push(res);
    }
    let mut degenerate = Vec::new();
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if (values[i] - values[j]).abs() < opts.degeneracy_gap {
                degenerate.push((i, j));
            }
        }
    }
    let w = grid.cell_volume().sqrt();
    let vectors = cols
        .into_iter()
        .map(|v| RealField::from_values(grid, v.into_iter().map(|x| x / w).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EigenPairs { values, vectors, residuals, degenerate, iterations })
}

/// Largest-magnitude component made positive (first one on ties).
pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Twice-iterated modified Gram-Schmidt; dependent columns are replaced.
fn orthonormalize(cols: &mut [Vec<f64>], c: Option<&[f64]>) {
    let n = cols.first().map_or(0, |v| v.len());
    for k in 0..cols.len() {
        for attempt in 0..3 {
            for _ in 0..2 {
                project_out(c, &mut cols[k]);
                for j in 0..k {
                    let (head, tail) = cols.split_at_mut(k);
                    let s = dot(&head[j], &tail[0]);
                    axpy(-s, &head[j], &mut tail[0]);
                }
            }
            let norm = dot(&cols[k], &cols[k]).sqrt();
            if norm > 1e-10 {
                for x in cols[k].iter_mut() {
                    *x /= norm;
                }
                break;
            }
            // replace with a deterministic probe and retry
            cols[k] = (0..n).map(|i| ((i * (k + 7 + attempt) + 3) as f64 * 0.618).sin()).collect();
        }
    }
}

/// Warm-start columns followed by low Dirichlet sine modes.
fn initial_block(grid: &Grid, c: Option<&[f64]>, block: usize, guess: Option<&[RealField]>) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(block);
    if let Some(g) = guess {
        for f in g.iter().take(block) {
            if f.grid() == grid {
                cols.push(f.values().to_vec());
            }
        }
    }
    let n = grid.points_per_axis();
    let dim = grid.dim();
    let mut modes: Vec<[usize; 3]> = Vec::new();
    let kmax = block + 2;
    for a in 1..=kmax {
        for b in 1..=if dim > 1 { kmax } else { 1 } {
            for d in 1..=if dim > 2 { kmax } else { 1 } {
                modes.push([a, b, d]);
            }
        }
    }
    modes.sort_by_key(|m| (m[0] * m[0] + m[1] * m[1] + m[2] * m[2], m[0], m[1], m[2]));
    let mut it = modes.into_iter();
    while cols.len() < block {
        let m = it.next().expect("enough sine modes");
        let v: Vec<f64> = (0..grid.len())
            .map(|flat| {
                let idx = grid.multi_index(flat);
                (0..dim)
                    .map(|ax| (std::f64::consts::PI * m[ax] as f64 * (idx[ax] as f64 + 0.5) / n as f64).sin())
                    .product()
            })
            .collect();
        cols.push(v);
    }
    orthonormalize(&mut cols, c);
    cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::operator::{build_hamiltonian, StencilOrder};

    fn harmonic(n: usize, l: f64) -> LinearOperator {
        let g = build_grid(1, l, n).unwrap();
        let v = RealField::from_fn(g, |x| x[0] * x[0]);
        build_hamiltonian(&g, &v).unwrap()
    }

    #[test]
    fn harmonic_spectrum() {
        let op = harmonic(256, 8.0);
        let e = eigensolve_lowest(&op, 4).unwrap();
        for (k, v) in e.values.iter().enumerate() {
            assert!((v - (2 * k + 1) as f64).abs() < 1e-3, "{k}: {v}");
        }
    }

    #[test]
    fn count_zero_is_empty() {
        let op = harmonic(64, 8.0);
        assert!(eigensolve_lowest(&op, 0).unwrap().values.is_empty());
    }

    #[test]
    fn vectors_are_orthonormal_with_positive_dominant_entry() {
        let op = harmonic(128, 8.0);
        let e = eigensolve_lowest(&op, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let ip = e.vectors[i].inner(&e.vectors[j]).unwrap();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-12);
            }
            let v = e.vectors[i].values();
            let dominant = v.iter().cloned().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(dominant > 0.0);
        }
    }

    #[test]
    fn iterative_path_matches_dense_oracle() {
        let g = build_grid(1, 8.0, 512).unwrap();
        let v = RealField::from_fn(g, |x| x[0] * x[0] + 0.5 * (3.0 * x[0]).cos());
        let op = build_hamiltonian(&g, &v).unwrap();
        let it = eigensolve_lowest(&op, 8).unwrap();
        let dn = dense_eigensolve_lowest(&op, 8).unwrap();
        assert!(it.iterations > 0);
        for k in 0..8 {
            assert!((it.values[k] - dn.values[k]).abs() < 1e-10 * dn.values[k].abs().max(1.0));
            let d = it.vectors[k].zip_map(&dn.vectors[k], |a, b| a - b).unwrap();
            assert!(d.sup_norm() < 1e-8, "mode {k}: {}", d.sup_norm());
        }
    }

    #[test]
    fn deflating_the_ground_state_returns_the_second_level() {
        let g = build_grid(1, 8.0, 512).unwrap();
        let v = RealField::from_fn(g, |x| x[0] * x[0] + 0.2 * x[0]);
        let op = build_hamiltonian(&g, &v).unwrap();
        let dn = dense_eigensolve_lowest(&op, 4).unwrap();
        let d = deflated_eigensolve(&op, &dn.vectors[0], 3).unwrap();
        for k in 0..3 {
            assert!((d.values[k] - dn.values[k + 1]).abs() < 1e-9);
            assert!(d.vectors[k].inner(&dn.vectors[0]).unwrap().abs() < 1e-10);
        }
        let dd = dense_deflated_eigensolve(&op, &dn.vectors[0], 3).unwrap();
        for k in 0..3 {
            assert!((d.values[k] - dd.values[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn deflating_a_high_mode_leaves_low_spectrum_unchanged() {
        let op = harmonic(200, 8.0);
        let full = dense_eigensolve_lowest(&op, 40).unwrap();
        let d = deflated_eigensolve(&op, &full.vectors[39], 5).unwrap();
        for k in 0..5 {
            assert!((d.values[k] - full.values[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn degeneracy_is_flagged_in_two_dimensions() {
        let g = build_grid(2, 6.0, 24).unwrap();
        let v = RealField::from_fn(g, |x| x[0] * x[0] + x[1] * x[1]);
        let op = LinearOperator::new(&g, &v, StencilOrder::Fourth).unwrap();
        let e = eigensolve_lowest(&op, 3).unwrap();
        assert_eq!(e.degenerate, vec![(1, 2)]);
        assert!(e.check_nondegenerate().is_err());
    }

    #[test]
    fn two_dimensional_iterative_solve() {
        let g = build_grid(2, 6.0, 32).unwrap();
        let v = RealField::from_fn(g, |x| x[0] * x[0] + 2.0 * x[1] * x[1]);
        let op = build_hamiltonian(&g, &v).unwrap();
        let e = eigensolve_lowest(&op, 3).unwrap();
        let s2 = 2f64.sqrt();
        let expect = [1.0 + s2, 3.0 + s2, 1.0 + 3.0 * s2];
        for k in 0..3 {
            assert!((e.values[k] - expect[k]).abs() < 2e-2, "{} vs {}", e.values[k], expect[k]);
        }
    }
}
