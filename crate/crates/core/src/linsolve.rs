//! Preconditioned conjugate gradients on a (possibly projected) subspace.

use crate::error::{Error, Result};
use crate::grid::{axpy, dot};

#[derive(Debug, Clone, Copy)]
pub struct PcgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for PcgOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-13, max_iter: 2000 }
    }
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `P A P x = P b` with `x` in the range of the projector `P`.
///
/// `apply` must be symmetric positive definite on that range and `precond`
/// symmetric positive definite; `project` is applied in place.
pub fn pcg(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    project: impl Fn(&mut [f64]),
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &PcgOptions,
) -> Result<PcgOutcome> {
    let n = b.len();
    let mut rhs = b.to_vec();
    project(&mut rhs);
    let bnorm = dot(&rhs, &rhs).sqrt();
    let mut x = match x0 {
        Some(v) => {
            let mut v = v.to_vec();
            project(&mut v);
            v
        }
        None => vec![0.0; n],
    };
    if bnorm == 0.0 {
        return Ok(PcgOutcome { solution: vec![0.0; n], iterations: 0, relative_residual: 0.0 });
    }
    let mut r = rhs.clone();
    if x.iter().any(|v| *v != 0.0) {
        let ax = apply(&x);
        axpy(-1.0, &ax, &mut r);
        project(&mut r);
    }
    let mut z = precond(&r);
    project(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    let mut best = rel;
    for it in 0..opts.max_iter {
        if rel <= opts.rel_tol {
            return Ok(PcgOutcome { solution: x, iterations: it, relative_residual: rel });
        }
        let mut ap = apply(&p);
        project(&mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            if rel < 1e-10 {
                break;
            }
            return Err(Error::LinearSolver(format!(
                "operator not positive definite on the search space (p.Ap = {pap:.3e})"
            )));
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        rel = dot(&r, &r).sqrt() / bnorm;
        best = best.min(rel);
        z = precond(&r);
        project(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    if best < 1e-10 {
        log::debug!("conjugate gradients stopped at relative residual {rel:.3e}");
        return Ok(PcgOutcome { solution: x, iterations: opts.max_iter, relative_residual: rel });
    }
    Err(Error::LinearSolver(format!(
        "conjugate gradients reached {} iterations at relative residual {rel:.3e}",
        opts.max_iter
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|i| {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                2.0 * x[i] - l - r + 0.1 * x[i]
            })
            .collect()
    }

    #[test]
    fn solves_tridiagonal_system() {
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let out = pcg(laplacian, |r| r.to_vec(), |_| {}, &b, None, &PcgOptions::default()).unwrap();
        let back = laplacian(&out.solution);
        for i in 0..50 {
            assert!((back[i] - b[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn projected_solution_stays_in_subspace() {
        let n = 40;
        let c: Vec<f64> = vec![1.0 / (n as f64).sqrt(); n];
        let proj = |v: &mut [f64]| {
            let s = dot(v, &c);
            axpy(-s, &c, v);
        };
        let b: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let out = pcg(laplacian, |r| r.to_vec(), proj, &b, None, &PcgOptions::default()).unwrap();
        assert!(dot(&out.solution, &c).abs() < 1e-12);
        let mut back = laplacian(&out.solution);
        proj(&mut back);
        let mut pb = b.clone();
        proj(&mut pb);
        for i in 0..n {
            assert!((back[i] - pb[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_operator_is_reported() {
        let b = vec![1.0, 0.0, 0.0];
        let neg = |x: &[f64]| x.iter().map(|v| -v).collect::<Vec<f64>>();
        assert!(pcg(neg, |r| r.to_vec(), |_| {}, &b, None, &PcgOptions::default()).is_err());
    }
}
