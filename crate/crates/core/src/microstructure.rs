//! Zero-mean periodic modulation `A(y)` of the coupling `g = g0 (1 + A(x / eps))`.
//!
//! `A` is stored as a finite Fourier series over wave vectors `l != 0`. Only
//! lexicographically positive `l` are listed; the conjugate modes are implied,
//! so `A(y) = sum 2 Re(a_l exp(2 pi i l.y))` is real by construction.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::log_log_slope;
use crate::grid::{Complex64, Grid, RealField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierMode {
    pub l: Vec<i64>,
    pub re: f64,
    pub im: f64,
}

impl FourierMode {
    fn coefficient(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }

    fn wavenumber_sq(&self) -> f64 {
        4.0 * PI * PI * self.l.iter().map(|&k| (k * k) as f64).sum::<f64>()
    }

    fn phase(&self, y: &[f64]) -> f64 {
        2.0 * PI * self.l.iter().zip(y).map(|(&k, &yi)| k as f64 * yi).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MicrostructureSpec {
    g0: f64,
    #[serde(default)]
    modes: Vec<FourierMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MicrostructureSpec", into = "MicrostructureSpec")]
pub struct Microstructure {
    g0: f64,
    modes: Vec<FourierMode>,
}

impl TryFrom<MicrostructureSpec> for Microstructure {
    type Error = Error;
    fn try_from(s: MicrostructureSpec) -> Result<Self> {
        Microstructure::new(s.g0, s.modes)
    }
}

impl From<Microstructure> for MicrostructureSpec {
    fn from(m: Microstructure) -> Self {
        MicrostructureSpec { g0: m.g0, modes: m.modes }
    }
}

impl Microstructure {
    pub fn new(g0: f64, modes: Vec<FourierMode>) -> Result<Self> {
        if !(g0 > 0.0) || !g0.is_finite() {
            return Err(Error::InvalidArgument(format!("g0 = {g0} must be positive")));
        }
        let dim = modes.first().map_or(0, |m| m.l.len());
        for (i, m) in modes.iter().enumerate() {
            if m.l.is_empty() || m.l.len() != dim || m.l.len() > 3 {
                return Err(Error::InvalidArgument(format!("mode {i}: wave vector length must match and be 1..=3")));
            }
            match m.l.iter().find(|&&k| k != 0) {
                None => return Err(Error::InvalidArgument(format!("mode {i}: zero wave vector (A must have zero mean)"))),
                Some(&k) if k < 0 => {
                    return Err(Error::InvalidArgument(format!(
                        "mode {i}: wave vector {:?} is not lexicographically positive",
                        m.l
                    )))
                }
                _ => {}
            }
            if !m.re.is_finite() || !m.im.is_finite() {
                return Err(Error::InvalidArgument(format!("mode {i}: non-finite amplitude")));
            }
            if modes[..i].iter().any(|o| o.l == m.l) {
                return Err(Error::InvalidArgument(format!("mode {i}: duplicate wave vector {:?}", m.l)));
            }
        }
        Ok(Self { g0, modes })
    }

    /// `A == 0`.
    pub fn uniform(g0: f64) -> Result<Self> {
        Self::new(g0, vec![])
    }

    /// `A(y) = amplitude * cos(2 pi y_1)`.
    pub fn cosine(g0: f64, amplitude: f64) -> Result<Self> {
        Self::new(g0, vec![FourierMode { l: vec![1], re: 0.5 * amplitude, im: 0.0 }])
    }

    pub fn g0(&self) -> f64 {
        self.g0
    }

    pub fn modes(&self) -> &[FourierMode] {
        &self.modes
    }

    pub fn is_zero(&self) -> bool {
        self.modes.iter().all(|m| m.re == 0.0 && m.im == 0.0)
    }

    /// Number of cell coordinates `A` depends on (0 when uniform).
    pub fn dim(&self) -> usize {
        self.modes.first().map_or(0, |m| m.l.len())
    }

    /// Sum over all modes, conjugates included; the imaginary part is roundoff.
    pub fn eval_a_complex(&self, y: &[f64]) -> Complex64 {
        self.modes
            .iter()
            .map(|m| {
                let e = Complex64::from_polar(1.0, m.phase(y));
                m.coefficient() * e + m.coefficient().conj() * e.conj()
            })
            .sum()
    }

    fn spectral_sum(&self, y: &[f64], weight: impl Fn(&FourierMode) -> f64) -> f64 {
        self.modes
            .iter()
            .map(|m| {
                let t = m.phase(y);
                2.0 * (m.re * t.cos() - m.im * t.sin()) * weight(m)
            })
            .sum()
    }

    pub fn eval_a(&self, y: &[f64]) -> f64 {
        self.spectral_sum(y, |_| 1.0)
    }

    /// `(-Delta)^{-1} A` on the unit cell.
    pub fn eval_inv_laplacian_a(&self, y: &[f64]) -> f64 {
        self.spectral_sum(y, |m| 1.0 / m.wavenumber_sq())
    }

    /// `(-Delta)^{-2} A`.
    pub fn eval_inv_laplacian_sq_a(&self, y: &[f64]) -> f64 {
        self.spectral_sum(y, |m| 1.0 / m.wavenumber_sq().powi(2))
    }

    /// Gradient of `(-Delta)^{-2} A`, one entry per cell coordinate.
    pub fn eval_grad_inv_laplacian_sq_a(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for m in &self.modes {
            let t = m.phase(y);
            let w = 1.0 / m.wavenumber_sq().powi(2);
            let d = -2.0 * (m.re * t.sin() + m.im * t.cos()) * w;
            for (o, &k) in out.iter_mut().zip(&m.l) {
                *o += 2.0 * PI * k as f64 * d;
            }
        }
        out
    }

    /// `||A||_{-1}^2 = sum_{l != 0} |a_l|^2 / (4 pi^2 |l|^2)`.
    pub fn h_minus_one_norm_sq(&self) -> f64 {
        self.modes.iter().map(|m| 2.0 * m.coefficient().norm_sqr() / m.wavenumber_sq()).sum()
    }

    /// Trapezoid average over the unit cell with `points` nodes per axis.
    pub fn cell_average(&self, points: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        let d = self.dim().max(1);
        let total = points.pow(d as u32);
        let mut y = vec![0.0; d];
        let mut acc = 0.0;
        for flat in 0..total {
            let mut r = flat;
            for yi in y.iter_mut().rev() {
                *yi = (r % points) as f64 / points as f64;
                r /= points;
            }
            acc += f(&y);
        }
        acc / total as f64
    }

    /// `<(-Delta)^{-1} A, A>` by cell quadrature, exact for trigonometric
    /// polynomials once `points` exceeds twice the largest wavenumber.
    pub fn h_minus_one_norm_sq_quadrature(&self, points: usize) -> f64 {
        self.cell_average(points, |y| self.eval_inv_laplacian_a(y) * self.eval_a(y))
    }

    fn cell_point(&self, x: &[f64], eps: f64) -> Vec<f64> {
        (0..self.dim()).map(|a| x.get(a).copied().unwrap_or(0.0) / eps).collect()
    }

    /// `g0 [1 + A(x / eps)]` at the grid nodes; `None` gives the constant `g0`.
    pub fn sample_coupling(&self, grid: &Grid, eps: Option<f64>, require_positive: bool) -> Result<RealField> {
        if self.dim() > grid.dim() {
            return Err(Error::InvalidArgument(format!(
                "microstructure of dimension {} on a {}-dimensional grid",
                self.dim(),
                grid.dim()
            )));
        }
        let field = match eps {
            None => RealField::constant(*grid, self.g0),
            Some(e) if !(e > 0.0) => return Err(Error::InvalidArgument(format!("epsilon = {e} must be positive"))),
            Some(e) => RealField::from_fn(*grid, |x| self.g0 * (1.0 + self.eval_a(&self.cell_point(x, e)))),
        };
        if require_positive {
            let min = field.values().iter().cloned().fold(f64::INFINITY, f64::min);
            if !(min > 0.0) {
                return Err(Error::NonPositiveCoupling(min));
            }
        }
        Ok(field)
    }

    /// Samples `f(A-derived cell value)` at `x / eps` for each node.
    pub fn sample_fast(&self, grid: &Grid, eps: f64, f: impl Fn(&Self, &[f64]) -> f64) -> RealField {
        RealField::from_fn(*grid, |x| f(self, &self.cell_point(x, eps)))
    }
}

/// Smooth test functions for the oscillatory-integral check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    /// `exp(-x^2)`.
    Gaussian,
    /// `exp(-1 / (1 - x^2))` on `|x| < 1`.
    Bump,
}

impl FromStr for TestFunction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "bump" => Ok(Self::Bump),
            other => Err(Error::InvalidArgument(format!("unknown test function {other:?}"))),
        }
    }
}

impl TestFunction {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Gaussian => (-x * x).exp(),
            Self::Bump => {
                if x.abs() < 1.0 {
                    (-1.0 / (1.0 - x * x)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    fn support(self) -> f64 {
        match self {
            Self::Gaussian => 10.0,
            Self::Bump => 1.0,
        }
    }

    /// `int phi`, closed form for the Gaussian and fine quadrature for the bump.
    pub fn integral(self) -> f64 {
        match self {
            Self::Gaussian => PI.sqrt(),
            Self::Bump => trapezoid(|x| self.eval(x), self.support(), 1.0 / 65536.0),
        }
    }

    /// Suggested decreasing scales at which the remainder is still resolvable.
    pub fn default_epsilons(self) -> Vec<f64> {
        match self {
            Self::Gaussian => vec![1.0, 0.9, 0.8, 0.7],
            Self::Bump => vec![0.5, 0.25, 0.125, 0.0625],
        }
    }
}

fn trapezoid(f: impl Fn(f64) -> f64, half: f64, h_max: f64) -> f64 {
    let n = (2.0 * half / h_max).ceil() as usize;
    let h = 2.0 * half / n as f64;
    // endpoint values vanish for both test functions
    (1..n).map(|i| f(-half + i as f64 * h)).sum::<f64>() * h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub epsilons: Vec<f64>,
    /// `|int P(x/eps) phi - <P> int phi|` per epsilon.
    pub remainders: Vec<f64>,
    /// Least-squares slope over the remainders above the resolution floor.
    pub slope: Option<f64>,
    /// Fewer than two remainders above `1e-14`.
    pub beyond_resolution: bool,
}

impl DecayReport {
    pub fn passes(&self, order: f64) -> bool {
        self.beyond_resolution || self.slope.is_some_and(|s| s >= order)
    }
}

pub const RESOLUTION_FLOOR: f64 = 1e-14;

/// Measures the decay of `int P(x/eps) phi(x) dx - <P> int phi` with
/// `P = mean + A`, on a one-dimensional line.
pub fn verify_oscillatory_decay(
    m: &Microstructure,
    mean: f64,
    test: TestFunction,
    eps_list: &[f64],
) -> Result<DecayReport> {
    if m.dim() > 1 {
        return Err(Error::InvalidArgument("oscillatory-integral check is one-dimensional".into()));
    }
    if eps_list.len() < 4 {
        return Err(Error::InvalidArgument("at least four epsilons are needed".into()));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("epsilons must be positive and strictly decreasing".into()));
    }
    let reference = mean * test.integral();
    let mut remainders = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let h = (eps / 64.0).min(1.0 / 1024.0);
        let val = trapezoid(|x| (mean + m.eval_a(&[x / eps])) * test.eval(x), test.support(), h);
        remainders.push((val - reference).abs());
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        eps_list.iter().zip(&remainders).filter(|(_, r)| **r > RESOLUTION_FLOOR).map(|(e, r)| (*e, *r)).unzip();
    let beyond_resolution = xs.len() < 2;
    let slope = if beyond_resolution { None } else { Some(log_log_slope(&xs, &ys)?) };
    Ok(DecayReport { epsilons: eps_list.to_vec(), remainders, slope, beyond_resolution })
}
