//! Bose-Einstein occupation closure.
//!
//! Occupations are `n = 1 / (z^{-1} exp(beta mu) - 1)`, with the multiplier `z`
//! and condensate fraction `xi` fixed by
//! `N xi = n(mu)` and `N (1 - xi) = sum_j n(mu_j)`.
//! The multiplier is stored as `ln z` so that large `beta mu` stays finite.
//!
//! The expansion in a small parameter uses the ratios `r_k = z^(k) / z^(0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermoParams {
    /// Inverse temperature.
    pub beta: f64,
    /// Total particle number `N`.
    pub particles: f64,
    /// Number of retained excited states `J`.
    pub excited_states: usize,
}

impl ThermoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta = {} must be positive", self.beta)));
        }
        if !(self.particles >= 1.0) || !self.particles.is_finite() {
            return Err(Error::InvalidArgument(format!("particle number {} must be at least 1", self.particles)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermoState {
    pub beta: f64,
    pub particles: f64,
    pub xi: f64,
    pub ln_z: f64,
    pub mu: f64,
    pub mu_excited: Vec<f64>,
    pub occupations: Vec<f64>,
}

impl ThermoState {
    pub fn z(&self) -> f64 {
        self.ln_z.exp()
    }

    /// `N xi + sum_j n_j - N`.
    pub fn number_residual(&self) -> f64 {
        self.particles * self.xi + self.occupations.iter().sum::<f64>() - self.particles
    }

    /// Backward error of the Bose formula: largest mismatch between `beta mu - ln z`
    /// and the argument `ln(1 + 1/n)` implied by each stored occupation, condensate
    /// included, relative to the magnitude of the terms that were subtracted.
    pub fn occupation_residual(&self) -> f64 {
        let arg = |mu: f64, n: f64| {
            let x = self.beta * mu - self.ln_z;
            let scale = 1.0f64.max((self.beta * mu).abs() + self.ln_z.abs());
            if n > 0.0 {
                (x - (1.0 / n).ln_1p()).abs() / scale
            } else if x.exp_m1().recip() == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        self.occupations
            .iter()
            .zip(&self.mu_excited)
            .map(|(&n, &mu)| arg(mu, n))
            .fold(arg(self.mu, self.particles * self.xi), f64::max)
    }
}

/// `n = 1 / (z^{-1} exp(beta mu) - 1)`.
pub fn occupation(z: f64, beta: f64, mu: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::InvalidArgument(format!("z = {z} must be positive")));
    }
    occupation_ln(z.ln(), beta, mu)
}

/// Occupation with the multiplier given as `ln z`.
pub fn occupation_ln(ln_z: f64, beta: f64, mu: f64) -> Result<f64> {
    let x = beta * mu - ln_z;
    if !(x > 0.0) {
        return Err(Error::OccupancyDivergence { argument: x.exp() });
    }
    Ok(1.0 / x.exp_m1())
}

/// Excited-state occupation at condensate population `s = N xi`, gap `d = mu_j - mu`.
fn excited_at(beta: f64, s: f64, gap: f64) -> f64 {
    1.0 / (beta * gap + (1.0 / s).ln_1p()).exp_m1()
}

/// Solves the zeroth-order closure for `(xi, z)` given the eigenvalues.
pub fn solve_xi_z_order0(params: &ThermoParams, mu0: f64, mu_j0: &[f64]) -> Result<ThermoState> {
    params.validate()?;
    let n = params.particles;
    let beta = params.beta;
    if let Some(j) = mu_j0.iter().position(|&m| !(m > mu0)) {
        return Err(Error::InvalidArgument(format!(
            "excited level {j} ({}) is not above the condensate level {mu0}",
            mu_j0[j]
        )));
    }
    let gaps: Vec<f64> = mu_j0.iter().map(|m| m - mu0).collect();
    let excess = |s: f64| s + gaps.iter().map(|&d| excited_at(beta, s, d)).sum::<f64>() - n;

    let s = if gaps.is_empty() {
        n
    } else {
        let lo = 1e-8 * n;
        if excess(lo) > 0.0 {
            return Err(Error::ThermoRange {
                excited: gaps.len(),
                detail: format!("thermal states hold more than N particles even at xi = 1e-8 (beta = {beta})"),
            });
        }
        // geometric scan for the first sign change, then bisection to the ulp
        let pts = 64;
        let mut a = lo;
        let mut b = n;
        for k in 1..=pts {
            let x = lo * (n / lo).powf(k as f64 / pts as f64);
            if excess(x) >= 0.0 {
                b = x;
                break;
            }
            a = x;
        }
        if excess(b) < 0.0 {
            return Err(Error::ThermoRange { excited: gaps.len(), detail: "no sign change on (1e-8, 1]".into() });
        }
        loop {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if excess(m) < 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        if excess(a).abs() < excess(b).abs() {
            a
        } else {
            b
        }
    };
    let xi = s / n;
    let ln_z = beta * mu0 - (1.0 / s).ln_1p();
    let occupations = gaps.iter().map(|&d| excited_at(beta, s, d)).collect();
    Ok(ThermoState { beta, particles: n, xi, ln_z, mu: mu0, mu_excited: mu_j0.to_vec(), occupations })
}

/// One expansion order of the closure.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThermoOrder {
    pub mu: f64,
    pub mu_excited: Vec<f64>,
    pub xi: f64,
    /// `z^(k) / z^(0)`.
    pub z_ratio: f64,
    pub occupations: Vec<f64>,
}

impl ThermoOrder {
    pub fn zero(excited: usize) -> Self {
        Self { mu_excited: vec![0.0; excited], occupations: vec![0.0; excited], ..Default::default() }
    }

    /// `z^(k)` itself; overflows to infinity when `z^(0)` does.
    pub fn z(&self, base: &ThermoState) -> f64 {
        self.z_ratio * base.z()
    }
}

/// `D = w / (w - 1)^2` and `q = w / (w - 1)` with `w = z^{-1} exp(beta mu)`.
#[derive(Debug, Clone, Copy)]
struct LevelWeight {
    d: f64,
    q: f64,
}

impl LevelWeight {
    fn at(x: f64) -> Self {
        let sh = (0.5 * x).sinh();
        Self { d: 1.0 / (4.0 * sh * sh), q: -1.0 / (-x).exp_m1() }
    }

    fn first(self, beta: f64, r1: f64, mu1: f64) -> f64 {
        self.d * (r1 - beta * mu1)
    }

    /// Second-order coefficient without its `D r_2` part.
    fn second_rest(self, beta: f64, r1: f64, mu1: f64, mu2: f64) -> f64 {
        let a = r1 - beta * mu1;
        self.d * (-(r1 * r1 - beta * mu1 * r1 + beta * mu2 + 0.5 * beta * beta * mu1 * mu1) + self.q * a * a)
    }
}

fn weights(state: &ThermoState) -> (LevelWeight, Vec<LevelWeight>) {
    let x0 = (1.0 / (state.particles * state.xi)).ln_1p();
    let cond = LevelWeight::at(x0);
    let exc = state.mu_excited.iter().map(|&m| LevelWeight::at(state.beta * m - state.ln_z)).collect();
    (cond, exc)
}

fn check_lengths(state: &ThermoState, v: &[f64], what: &str) -> Result<()> {
    if v.len() != state.mu_excited.len() {
        return Err(Error::InvalidArgument(format!(
            "{what}: {} excited values for {} levels",
            v.len(),
            state.mu_excited.len()
        )));
    }
    Ok(())
}

/// Occupation coefficients `n_j^(k)` for `k = 1, 2`.
pub fn occupation_coeffs(
    order: usize,
    state: &ThermoState,
    first: &ThermoOrder,
    second: Option<&ThermoOrder>,
) -> Result<Vec<f64>> {
    check_lengths(state, &first.mu_excited, "first order")?;
    let (_, exc) = weights(state);
    let beta = state.beta;
    match order {
        1 => Ok(exc.iter().zip(&first.mu_excited).map(|(w, &m1)| w.first(beta, first.z_ratio, m1)).collect()),
        2 => {
            let second = second.ok_or_else(|| Error::MissingSlice("second-order inputs".into()))?;
            check_lengths(state, &second.mu_excited, "second order")?;
            Ok(exc
                .iter()
                .zip(first.mu_excited.iter().zip(&second.mu_excited))
                .map(|(w, (&m1, &m2))| w.d * second.z_ratio + w.second_rest(beta, first.z_ratio, m1, m2))
                .collect())
        }
        k => Err(Error::InvalidArgument(format!("occupation coefficients exist for orders 1 and 2, not {k}"))),
    }
}

/// First-order `(xi^(1), z^(1))` from the eigenvalue shifts.
pub fn solve_xi_z_order1(state: &ThermoState, mu1: f64, mu_j1: &[f64]) -> Result<ThermoOrder> {
    check_lengths(state, mu_j1, "first order")?;
    let (c, exc) = weights(state);
    let beta = state.beta;
    let den = c.d + exc.iter().map(|w| w.d).sum::<f64>();
    let num = c.d * beta * mu1 + exc.iter().zip(mu_j1).map(|(w, &m)| w.d * beta * m).sum::<f64>();
    let r1 = num / den;
    let mut out = ThermoOrder { mu: mu1, mu_excited: mu_j1.to_vec(), xi: 0.0, z_ratio: r1, occupations: vec![] };
    out.xi = c.first(beta, r1, mu1) / state.particles;
    out.occupations = occupation_coeffs(1, state, &out, None)?;
    Ok(out)
}

/// Second-order `(xi^(2), z^(2))` from a 2x2 system in `(r_2, N xi^(2))`.
pub fn solve_xi_z_order2(state: &ThermoState, first: &ThermoOrder, mu2: f64, mu_j2: &[f64]) -> Result<ThermoOrder> {
    check_lengths(state, mu_j2, "second order")?;
    check_lengths(state, &first.mu_excited, "first order")?;
    let (c, exc) = weights(state);
    let beta = state.beta;
    let r1 = first.z_ratio;
    let sum_d: f64 = exc.iter().map(|w| w.d).sum();
    let sum_rest: f64 = exc
        .iter()
        .zip(first.mu_excited.iter().zip(mu_j2))
        .map(|(w, (&m1, &m2))| w.second_rest(beta, r1, m1, m2))
        .sum();
    // [-D0 1; sum D_j 1] [r2; N xi2] = [rest_0; -sum rest_j]
    let m = nalgebra::Matrix2::new(-c.d, 1.0, sum_d, 1.0);
    let rhs = nalgebra::Vector2::new(c.second_rest(beta, r1, first.mu, mu2), -sum_rest);
    let det = m.determinant();
    if !(det.abs() > 1e-300) || !det.is_finite() {
        return Err(Error::SingularSystem(format!("closure determinant {det:.3e}")));
    }
    let sol = m.lu().solve(&rhs).ok_or_else(|| Error::SingularSystem("closure system".into()))?;
    let mut out = ThermoOrder { mu: mu2, mu_excited: mu_j2.to_vec(), xi: sol[1] / state.particles, z_ratio: sol[0], occupations: vec![] };
    out.occupations = occupation_coeffs(2, state, first, Some(&out))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(beta: f64, j: usize) -> ThermoParams {
        ThermoParams { beta, particles: 100.0, excited_states: j }
    }

    #[test]
    fn occupation_examples() {
        assert!((occupation(0.5, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((occupation(1.0, 1.0, 2f64.ln()).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(occupation(1.0, 1.0, 0.0), Err(Error::OccupancyDivergence { .. })));
        assert!(matches!(occupation(2.0, 1.0, 0.1), Err(Error::OccupancyDivergence { .. })));
    }

    #[test]
    fn occupation_decreases_with_beta() {
        let mut last = f64::INFINITY;
        for beta in [0.5, 1.0, 2.0, 5.0, 10.0, 50.0] {
            let n = occupation(1.0, beta, 0.7).unwrap();
            assert!(n < last && n > 0.0);
            last = n;
        }
    }

    #[test]
    fn empty_excited_set() {
        let s = solve_xi_z_order0(&params(1.0, 0), 1.0, &[]).unwrap();
        assert_eq!(s.xi, 1.0);
        let z0 = 1f64.exp() * 100.0 / 101.0;
        assert!((s.z() - z0).abs() < 1e-14 * z0);
    }

    #[test]
    fn cold_limit_freezes_excitations() {
        let s = solve_xi_z_order0(&params(40.0, 2), 1.0, &[3.0, 5.0]).unwrap();
        assert!(1.0 - s.xi <= (-40.0 * 2.0f64).exp());
        let s = solve_xi_z_order0(&params(1e3, 2), 1.0, &[3.0, 5.0]).unwrap();
        assert_eq!(s.xi, 1.0);
        assert!(s.ln_z.is_finite());
    }

    #[test]
    fn bisection_oracle_and_residuals() {
        let s = solve_xi_z_order0(&params(1.0, 2), 1.0, &[3.0, 5.0]).unwrap();
        // independent plain bisection of N xi = N - sum 1/((1 + 1/(N xi)) e^{beta d} - 1)
        let f = |xi: f64| {
            let s = 100.0 * xi;
            s - 100.0 + [2.0f64, 4.0].iter().map(|d| 1.0 / ((1.0 + 1.0 / s) * d.exp() - 1.0)).sum::<f64>()
        };
        let (mut a, mut b) = (1e-8, 1.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(m) < 0.0 {
                a = m
            } else {
                b = m
            }
        }
        assert!((s.xi - a).abs() < 1e-14);
        // both constraints by substitution
        let n0 = 1.0 / ((1.0f64).exp() / s.z() - 1.0);
        assert!((n0 - 100.0 * s.xi).abs() < 1e-12 * 100.0);
        let nj: f64 = [3.0f64, 5.0].iter().map(|m| 1.0 / (m.exp() / s.z() - 1.0)).sum();
        assert!((100.0 * (1.0 - s.xi) - nj).abs() < 1e-12);
        assert!(s.number_residual().abs() < 1e-10);
        assert!(s.occupation_residual() < 1e-14);
    }

    #[test]
    fn condensate_must_be_lowest_level() {
        assert!(matches!(solve_xi_z_order0(&params(1.0, 1), 1.0, &[0.5]), Err(Error::InvalidArgument(_))));
        assert!(matches!(solve_xi_z_order0(&params(1.0, 1), 1.0, &[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hot_gas_keeps_a_small_condensate() {
        let s = solve_xi_z_order0(&ThermoParams { beta: 1e-6, particles: 10.0, excited_states: 3 }, 0.0, &[1e-3, 2e-3, 3e-3])
            .unwrap();
        assert!(s.xi > 0.0 && s.xi < 0.3);
        assert!(s.number_residual().abs() < 1e-10);
    }

    fn base() -> ThermoState {
        solve_xi_z_order0(&params(1.0, 3), 1.0, &[2.5, 4.0, 6.5]).unwrap()
    }

    #[test]
    fn zero_perturbations_give_zero_coefficients() {
        let s = base();
        let o1 = solve_xi_z_order1(&s, 0.0, &[0.0; 3]).unwrap();
        assert_eq!((o1.xi, o1.z_ratio), (0.0, 0.0));
        assert!(o1.occupations.iter().all(|&n| n == 0.0));
        let o2 = solve_xi_z_order2(&s, &o1, 0.0, &[0.0; 3]).unwrap();
        assert_eq!((o2.xi, o2.z_ratio), (0.0, 0.0));
    }

    #[test]
    fn cancelling_first_order_inputs() {
        let s = base();
        let first = ThermoOrder { mu: 0.0, mu_excited: vec![0.3, -0.2, 0.7], xi: 0.0, z_ratio: 0.0, occupations: vec![] };
        let r = 0.4;
        let mut c = first.clone();
        c.z_ratio = r;
        c.mu_excited = vec![r / s.beta; 3];
        assert!(occupation_coeffs(1, &s, &c, None).unwrap().iter().all(|n| n.abs() < 1e-15));
    }

    fn occupation_path(s: &ThermoState, r1: f64, r2: f64, m: (f64, f64, f64), e: f64) -> f64 {
        let z = s.z() * (1.0 + e * r1 + e * e * r2);
        occupation(z, s.beta, m.0 + e * m.1 + e * e * m.2).unwrap()
    }

    #[test]
    fn occupation_coefficients_match_finite_differences() {
        let s = base();
        let (r1, r2) = (0.13, -0.21);
        let mu1 = [0.3, -0.2, 0.7];
        let mu2 = [-0.05, 0.4, 0.1];
        let first = ThermoOrder { mu: 0.0, mu_excited: mu1.to_vec(), xi: 0.0, z_ratio: r1, occupations: vec![] };
        let second = ThermoOrder { mu: 0.0, mu_excited: mu2.to_vec(), xi: 0.0, z_ratio: r2, occupations: vec![] };
        let n1 = occupation_coeffs(1, &s, &first, None).unwrap();
        let n2 = occupation_coeffs(2, &s, &first, Some(&second)).unwrap();
        let d = 1e-4;
        for j in 0..3 {
            let m = (s.mu_excited[j], mu1[j], mu2[j]);
            let p = occupation_path(&s, r1, r2, m, d);
            let q = occupation_path(&s, r1, r2, m, -d);
            let c = occupation_path(&s, r1, r2, m, 0.0);
            assert!((n1[j] - (p - q) / (2.0 * d)).abs() < 1e-6);
            assert!((n2[j] - (p - 2.0 * c + q) / (2.0 * d * d)).abs() < 1e-6);
        }
    }

    #[test]
    fn first_order_matches_closed_form() {
        let s = base();
        let mu1 = 0.2;
        let mu_j1 = [0.5, -0.1, 0.3];
        let o = solve_xi_z_order1(&s, mu1, &mu_j1).unwrap();
        // N xi1 = -{1 + z0 e^{-b mu0} (w0 - 1)^2 S}^{-1} sum D_j beta (mu1 - mu_j1)
        let w0 = (s.beta * s.mu - s.ln_z).exp();
        let dj: Vec<f64> = s.mu_excited.iter().map(|m| {
            let w = (s.beta * m - s.ln_z).exp();
            w / (w - 1.0).powi(2)
        }).collect();
        let sum: f64 = dj.iter().sum();
        let num: f64 = dj.iter().zip(&mu_j1).map(|(d, m)| d * s.beta * (mu1 - m)).sum();
        let nxi1 = -num / (1.0 + (w0 - 1.0).powi(2) / w0 * sum);
        assert!((o.xi * s.particles - nxi1).abs() < 1e-10);
        let r1 = s.beta * mu1 + nxi1 * (w0 - 1.0).powi(2) / w0;
        assert!((o.z_ratio - r1).abs() < 1e-10);
        assert!((s.particles * o.xi + o.occupations.iter().sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn second_order_satisfies_z_relation_and_number_constraint() {
        let s = base();
        let o1 = solve_xi_z_order1(&s, 0.2, &[0.5, -0.1, 0.3]).unwrap();
        let o2 = solve_xi_z_order2(&s, &o1, -0.3, &[0.1, 0.25, -0.4]).unwrap();
        assert!((s.particles * o2.xi + o2.occupations.iter().sum::<f64>()).abs() < 1e-10);
        let w0 = (s.beta * s.mu - s.ln_z).exp();
        let (b, n) = (s.beta, s.particles);
        let r2 = o1.z_ratio.powi(2)
            + (w0 - 1.0).powi(2) / w0 * (n * o2.xi - n * o1.xi * (b * o1.mu + n * o1.xi * (w0 - 1.0)))
            + b * o2.mu
            - 0.5 * (b * o1.mu).powi(2);
        assert!((o2.z_ratio - r2).abs() < 1e-9, "{} vs {r2}", o2.z_ratio);
    }

    /// Remainder of the two-term expansion of `xi` along an eigenvalue path.
    fn path_remainders(s: &ThermoState, mu: [f64; 3], mu_j: [[f64; 3]; 3], eps: &[f64]) -> Vec<f64> {
        let p = params(s.beta, 3);
        let o1 = solve_xi_z_order1(s, mu[1], &mu_j.iter().map(|m| m[1]).collect::<Vec<_>>()).unwrap();
        let o2 = solve_xi_z_order2(s, &o1, mu[2], &mu_j.iter().map(|m| m[2]).collect::<Vec<_>>()).unwrap();
        eps.iter()
            .map(|&e| {
                let mj: Vec<f64> = mu_j.iter().map(|m| m[0] + e * m[1] + e * e * m[2]).collect();
                let exact = solve_xi_z_order0(&p, mu[0] + e * mu[1] + e * e * mu[2], &mj).unwrap().xi;
                (exact - s.xi - e * o1.xi - e * e * o2.xi).abs()
            })
            .collect()
    }

    #[test]
    fn second_order_matches_path_second_derivative() {
        let s = base();
        let mu_j = [[2.5, 0.0, 0.3], [4.0, 0.0, -0.2], [6.5, 0.0, 0.5]];
        let o1 = solve_xi_z_order1(&s, 0.0, &[0.0; 3]).unwrap();
        let o2 = solve_xi_z_order2(&s, &o1, 0.1, &[0.3, -0.2, 0.5]).unwrap();
        let p = params(1.0, 3);
        let d = 1e-3;
        let xi = |e: f64| {
            let mj: Vec<f64> = mu_j.iter().map(|m| m[0] + e * e * m[2]).collect();
            solve_xi_z_order0(&p, 1.0 + e * e * 0.1, &mj).unwrap().xi
        };
        let fd = (xi(d) - 2.0 * xi(0.0) + xi(-d)) / (2.0 * d * d);
        assert!((o2.xi - fd).abs() < 1e-5, "{} vs {fd}", o2.xi);
        let _ = path_remainders;
    }

    #[test]
    fn expansion_remainder_is_third_order() {
        let s = base();
        let eps = [0.08, 0.04, 0.02, 0.01];
        let r = path_remainders(&s, [1.0, 0.2, -0.3], [[2.5, 0.5, 0.1], [4.0, -0.1, 0.25], [6.5, 0.3, -0.4]], &eps);
        let slope = crate::fit::log_log_slope(&eps, &r).unwrap();
        assert!(slope >= 2.7, "slope {slope}, remainders {r:?}");
    }

    proptest! {
        #[test]
        fn closure_constraints_hold(beta in 0.05f64..20.0, g1 in 0.1f64..5.0, g2 in 0.1f64..5.0, n in 1.0f64..1e4) {
            let p = ThermoParams { beta, particles: n, excited_states: 2 };
            match solve_xi_z_order0(&p, 0.5, &[0.5 + g1, 0.5 + g1 + g2]) {
                Ok(s) => {
                    prop_assert!(s.xi > 0.0 && s.xi <= 1.0);
                    prop_assert!(s.number_residual().abs() <= 1e-10 * n.max(1.0));
                    prop_assert!(s.occupation_residual() < 1e-14);
                    prop_assert!(s.occupations.iter().all(|&x| x >= 0.0));
                }
                Err(e) => {
                    let in_range_error = matches!(e, Error::ThermoRange { .. });
                    prop_assert!(in_range_error);
                }
            }
        }

        #[test]
        fn colder_never_lowers_condensate_fraction(beta in 0.05f64..10.0, factor in 1.0f64..5.0) {
            let p = |b| ThermoParams { beta: b, particles: 50.0, excited_states: 3 };
            let lv = [1.7, 2.9, 4.2];
            if let (Ok(a), Ok(b)) = (solve_xi_z_order0(&p(beta), 1.0, &lv), solve_xi_z_order0(&p(beta * factor), 1.0, &lv)) {
                prop_assert!(b.xi >= a.xi - 1e-15);
            }
        }
    }
}
