//! Symmetric band factorisations `A = L D L^T` without pivoting.
//!
//! Used for real symmetric positive definite systems (where a positive `D`
//! certifies definiteness) and for complex symmetric systems whose Hermitian
//! part is positive definite, as arising in Crank-Nicolson steps.

use nalgebra::ComplexField;

use crate::error::{Error, Result};

/// Band storage: `bands[0]` is the diagonal, `bands[k][i] = A[i + k][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricBand<T> {
    pub bands: Vec<Vec<T>>,
}

impl<T: ComplexField<RealField = f64> + Copy> SymmetricBand<T> {
    pub fn new(bands: Vec<Vec<T>>) -> Result<Self> {
        let n = bands.first().map_or(0, |d| d.len());
        for (k, b) in bands.iter().enumerate() {
            if b.len() != n.saturating_sub(k) {
                return Err(Error::InvalidArgument(format!(
                    "band {k} has length {} for order {n}",
                    b.len()
                )));
            }
        }
        Ok(Self { bands })
    }

    pub fn order(&self) -> usize {
        self.bands[0].len()
    }

    pub fn bandwidth(&self) -> usize {
        self.bands.len() - 1
    }

    fn get(&self, i: usize, j: usize) -> T {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        if k < self.bands.len() {
            self.bands[k][lo]
        } else {
            T::zero()
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let n = self.order();
        let mut y: Vec<T> = (0..n).map(|i| self.bands[0][i] * x[i]).collect();
        for (k, band) in self.bands.iter().enumerate().skip(1) {
            for i in 0..n - k {
                y[i + k] += band[i] * x[i];
                y[i] += band[i] * x[i + k];
            }
        }
        y
    }
}

/// `L D L^T` factors of a symmetric band matrix.
#[derive(Debug, Clone)]
pub struct BandedLdl<T> {
    n: usize,
    p: usize,
    // row i holds L[i][i - p .. i] (unit diagonal omitted)
    lower: Vec<T>,
    diag: Vec<T>,
}

impl<T: ComplexField<RealField = f64> + Copy> BandedLdl<T> {
    pub fn factor(a: &SymmetricBand<T>) -> Result<Self> {
        let n = a.order();
        let p = a.bandwidth();
        let mut lower = vec![T::zero(); n * p];
        let mut diag = vec![T::zero(); n];
        for i in 0..n {
            let j0 = i.saturating_sub(p);
            for j in j0..i {
                let k0 = j.saturating_sub(p).max(j0);
                let mut s = a.get(i, j);
                for k in k0..j {
                    s -= lower[i * p + (k + p - i)] * diag[k] * lower[j * p + (k + p - j)];
                }
                lower[i * p + (j + p - i)] = s / diag[j];
            }
            let mut d = a.get(i, i);
            for k in j0..i {
                let l = lower[i * p + (k + p - i)];
                d -= l * l * diag[k];
            }
            if d.modulus() == 0.0 || !d.modulus().is_finite() {
                return Err(Error::LinearSolver(format!("zero pivot at row {i}")));
            }
            diag[i] = d;
        }
        Ok(Self { n, p, lower, diag })
    }

    pub fn pivots(&self) -> &[T] {
        &self.diag
    }

    pub fn solve_in_place(&self, x: &mut [T]) {
        let (n, p) = (self.n, self.p);
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(p)..i {
                s -= self.lower[i * p + (k + p - i)] * x[k];
            }
            x[i] = s;
        }
        for i in 0..n {
            x[i] /= self.diag[i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + p + 1).min(n) {
                s -= self.lower[k * p + (i + p - k)] * x[k];
            }
            x[i] = s;
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

impl BandedLdl<f64> {
    /// Factor a real symmetric band matrix and require it to be positive definite.
    pub fn factor_spd(a: &SymmetricBand<f64>) -> Result<Self> {
        let f = Self::factor(a)?;
        if let Some(i) = f.diag.iter().position(|&d| d <= 0.0) {
            return Err(Error::LinearSolver(format!(
                "matrix is not positive definite (pivot {i} = {:.3e})",
                f.diag[i]
            )));
        }
        Ok(f)
    }
}
