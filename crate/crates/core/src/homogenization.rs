//! Two-scale expansion of the stationary system for `g = g0 [1 + A(x / eps)]`.
//!
//! With `chi = (-Delta_y)^{-1} A`, `R = rho_s0 + 2 rho_n0` and `Q = rho_s0 + rho_n0`,
//! the coefficients read
//!
//! ```text
//! Phi   ~ f0 + eps^2 (f2 - g0 R f0 chi) + eps^3 Phi3
//! phi_j ~ fj0 + eps^2 (fj2 - 2 g0 Q fj0 chi) + eps^3 phi_j3
//! ```
//!
//! The first-order slice vanishes. The slow second-order fields come from the
//! cell-averaged fourth-order equations, solved by a damped fixed point.

use std::thread;

use serde::Serialize;

use crate::config::ScfConfig;
use crate::eigen::{eigensolve_with, EigenOptions};
use crate::error::{Error, Result};
use crate::fit::log_log_slope;
use crate::grid::{axpy, dot, Grid, RealField};
use crate::linsolve::{pcg, PcgOptions};
use crate::microstructure::Microstructure;
use crate::operator::LinearOperator;
use crate::scf::{condensate_operator, excited_operator, full_epsilon_solve, scf_solve, ScfSolution, OCCUPATION_CUTOFF};
use crate::thermo::{solve_xi_z_order1, solve_xi_z_order2, ThermoOrder, ThermoState};

/// Extra deflated modes kept below the complement solve of each excited corrector.
const SPECTRAL_MARGIN: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { damping: 0.5, tol: 1e-10, max_sweeps: 200 }
    }
}

/// Per-order slow fields and scalars.
#[derive(Debug, Clone)]
pub struct ExpansionSolution {
    pub microstructure: Microstructure,
    /// `||A||_{-1}^2`.
    pub a_norm_sq: f64,
    /// `-Delta_h + V`.
    pub base: LinearOperator,
    pub particles: f64,
    /// `f^k`, `k = 0, 1, 2`.
    pub f: [RealField; 3],
    /// `f_j^k`.
    pub fj: [Vec<RealField>; 3],
    pub mu: [f64; 3],
    pub mu_excited: [Vec<f64>; 3],
    pub xi: [f64; 3],
    /// `z^(k) / z^(0)`; the first entry is 1.
    pub z_ratio: [f64; 3],
    pub occupations: [Vec<f64>; 3],
    pub b: [Vec<f64>; 3],
    /// Second-order coupling from the cell-averaged integral formula.
    pub b2_integral: Vec<f64>,
    pub rho_s: [RealField; 3],
    pub rho_n: [RealField; 3],
    /// Fast-mode density coefficients `bar rho_s^2`, `bar rho_n^2`.
    pub rho_bar_s2: RealField,
    pub rho_bar_n2: RealField,
    pub zeta: [f64; 3],
    /// `E^(k)`.
    pub energy: [f64; 3],
    /// `E_j^(k)`.
    pub energy_excited: [Vec<f64>; 3],
    /// Total-energy coefficients.
    pub total_energy: [f64; 3],
    pub thermo: Option<ThermoState>,
    pub sweeps: usize,
}

impl ExpansionSolution {
    pub fn grid(&self) -> &Grid {
        self.f[0].grid()
    }

    pub fn excited_count(&self) -> usize {
        self.fj[0].len()
    }

    pub fn g0(&self) -> f64 {
        self.microstructure.g0()
    }

    /// `rho_s0 + 2 rho_n0`.
    pub fn condensate_density(&self) -> RealField {
        self.rho_s[0].zip_map(&self.rho_n[0], |s, n| s + 2.0 * n).expect("same grid")
    }

    /// `rho_s0 + rho_n0`.
    pub fn excited_density(&self) -> RealField {
        self.rho_s[0].zip_map(&self.rho_n[0], |s, n| s + n).expect("same grid")
    }
}

fn w_inner(a: &RealField, b: &RealField) -> f64 {
    dot(a.values(), b.values()) * a.grid().cell_volume()
}

fn pointwise(a: &RealField, b: &RealField) -> RealField {
    a.zip_map(b, |x, y| x * y).expect("same grid")
}

fn sup_diff(a: &RealField, b: &RealField) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn active(n0: &[f64]) -> Vec<bool> {
    n0.iter().map(|&n| n >= OCCUPATION_CUTOFF).collect()
}

/// Zeroth order: the stationary state with constant coupling `g0`.
pub fn order0_solve(cfg: &ScfConfig) -> Result<ExpansionSolution> {
    let mut c = cfg.clone();
    c.epsilon = None;
    let sol = scf_solve(&c)?;
    Ok(from_order0(&sol, &cfg.microstructure))
}

/// Wraps a constant-coupling stationary state as the zeroth-order slice.
pub fn from_order0(sol: &ScfSolution, micro: &Microstructure) -> ExpansionSolution {
    let grid = *sol.grid();
    let j = sol.excited.len();
    let zero = RealField::zeros(grid);
    let zeros = vec![zero.clone(); j];
    let zj = vec![0.0; j];
    let g0 = micro.g0();
    let rho_bar_s2 = sol.rho_s.zip_map(&sol.rho_n, |s, n| 2.0 * s * (s + 2.0 * n)).expect("same grid");
    let rho_bar_n2 = sol.rho_s.zip_map(&sol.rho_n, |s, n| 4.0 * (s + n) * n).expect("same grid");
    let particles = sol.particles();
    let zeta0 = g0 * sol.phi.values().iter().map(|p| p.powi(4)).sum::<f64>() * grid.cell_volume() / particles;
    let mut out = ExpansionSolution {
        microstructure: micro.clone(),
        a_norm_sq: micro.h_minus_one_norm_sq(),
        base: sol.base.clone(),
        particles,
        f: [sol.phi.clone(), zero.clone(), zero.clone()],
        fj: [sol.excited.clone(), zeros.clone(), zeros],
        mu: [sol.mu, 0.0, 0.0],
        mu_excited: [sol.mu_excited.clone(), zj.clone(), zj.clone()],
        xi: [sol.xi, 0.0, 0.0],
        z_ratio: [1.0, 0.0, 0.0],
        occupations: [sol.occupations.clone(), zj.clone(), zj.clone()],
        b: [sol.b.clone(), zj.clone(), zj.clone()],
        b2_integral: zj.clone(),
        rho_s: [sol.rho_s.clone(), zero.clone(), zero.clone()],
        rho_n: [sol.rho_n.clone(), zero.clone(), zero],
        rho_bar_s2,
        rho_bar_n2,
        zeta: [zeta0, 0.0, 0.0],
        energy: [0.0; 3],
        energy_excited: [zj.clone(), zj.clone(), zj],
        total_energy: [0.0; 3],
        thermo: sol.thermo.clone(),
        sweeps: 0,
    };
    energy_expansion(&mut out);
    out
}

/// Residuals of the first-order slice, all of which vanish on the zero branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstOrderCheck {
    pub condensate_residual: f64,
    pub excited_residual: f64,
    pub thermo_xi: f64,
    pub thermo_z: f64,
    pub coupling: f64,
}

/// Adopts the zero first-order branch and verifies it by substitution.
pub fn order1_solve(exp: &mut ExpansionSolution) -> Result<FirstOrderCheck> {
    let grid = *exp.grid();
    let j = exp.excited_count();
    exp.f[1] = RealField::zeros(grid);
    exp.fj[1] = vec![RealField::zeros(grid); j];
    exp.mu[1] = 0.0;
    exp.mu_excited[1] = vec![0.0; j];
    let g0 = exp.g0();
    let act = active(&exp.occupations[0]);

    let t1 = match &exp.thermo {
        Some(t) => solve_xi_z_order1(t, exp.mu[1], &exp.mu_excited[1])?,
        None => ThermoOrder::zero(j),
    };
    exp.xi[1] = t1.xi;
    exp.z_ratio[1] = t1.z_ratio;
    exp.occupations[1] = t1.occupations.clone();

    // rho_s1 = xi1 f0^2 + 2 xi0 f0 f1, rho_n1 = sum n_j1 fj0^2 + 2 n_j0 fj0 fj1
    let rs1 = exp.f[0].zip_map(&exp.f[1], |a, b| exp.xi[1] * a * a + 2.0 * exp.xi[0] * a * b)?;
    let mut rn1 = RealField::zeros(grid);
    for k in 0..j {
        if !act[k] {
            continue;
        }
        let (n0, n1) = (exp.occupations[0][k], exp.occupations[1][k]);
        let add = exp.fj[0][k].zip_map(&exp.fj[1][k], |a, b| n1 * a * a + 2.0 * n0 * a * b)?;
        rn1 = rn1.zip_map(&add, |x, y| x + y)?;
    }
    let l0 = condensate_operator(&exp.base, &RealField::constant(grid, g0), &exp.rho_s[0], &exp.rho_n[0])?;
    let h0 = excited_operator(&exp.base, &RealField::constant(grid, g0), &exp.rho_s[0], &exp.rho_n[0])?;
    let w = grid.cell_volume();
    let norm = |v: &[f64]| (dot(v, v) * w).sqrt();

    let mut r = l0.apply(exp.f[1].values());
    axpy(-exp.mu[0], exp.f[1].values(), &mut r);
    for i in 0..grid.len() {
        r[i] -= (exp.mu[1] - g0 * (rs1.values()[i] + 2.0 * rn1.values()[i])) * exp.f[0].values()[i];
    }
    let condensate_residual = norm(&r);

    // b_j1 from the integral formula
    let f0_3 = exp.f[0].map(|x| x.powi(3));
    let f0_2 = exp.f[0].map(|x| x * x);
    let mut b1 = Vec::with_capacity(j);
    let mut excited_residual: f64 = 0.0;
    for k in 0..j {
        let fj0 = &exp.fj[0][k];
        let fj1 = &exp.fj[1][k];
        let b = g0 / exp.particles
            * (exp.xi[0] * (w_inner(&f0_3, fj1) + 3.0 * w_inner(&pointwise(&f0_2, fj0), &exp.f[1]))
                + exp.xi[1] * w_inner(&f0_3, fj0));
        b1.push(b);
        let mut r = h0.apply(fj1.values());
        axpy(-exp.mu_excited[0][k], fj1.values(), &mut r);
        axpy(-exp.b[0][k], exp.f[1].values(), &mut r);
        axpy(-b, exp.f[0].values(), &mut r);
        for i in 0..grid.len() {
            r[i] -= (exp.mu_excited[1][k] - 2.0 * g0 * (rs1.values()[i] + rn1.values()[i])) * fj0.values()[i];
        }
        excited_residual = excited_residual.max(norm(&r));
    }
    exp.b[1] = b1;
    exp.rho_s[1] = rs1;
    exp.rho_n[1] = rn1;
    let check = FirstOrderCheck {
        condensate_residual,
        excited_residual,
        thermo_xi: exp.xi[1],
        thermo_z: exp.z_ratio[1],
        coupling: exp.b[1].iter().fold(0.0, |m: f64, b| m.max(b.abs())),
    };
    let worst = check.condensate_residual.max(check.excited_residual).max(check.thermo_xi.abs()).max(check.coupling);
    if worst > 1e-10 {
        return Err(Error::Residual(format!("first-order zero branch fails substitution: {check:?}")));
    }
    energy_expansion(exp);
    Ok(check)
}

/// Fast parts of the second-order correctors.
#[derive(Debug, Clone)]
pub struct Corrector2 {
    microstructure: Microstructure,
    /// `-g0 R f0`.
    pub condensate_coeff: RealField,
    /// `-2 g0 Q fj0`.
    pub excited_coeff: Vec<RealField>,
    pub f2: RealField,
    pub fj2: Vec<RealField>,
}

impl Corrector2 {
    /// `Phi^(2)(y, x_i)`.
    pub fn condensate(&self, node: usize, y: &[f64]) -> f64 {
        self.condensate_coeff.values()[node] * self.microstructure.eval_inv_laplacian_a(y) + self.f2.values()[node]
    }

    /// `phi_j^(2)(y, x_i)`.
    pub fn excited(&self, j: usize, node: usize, y: &[f64]) -> f64 {
        self.excited_coeff[j].values()[node] * self.microstructure.eval_inv_laplacian_a(y) + self.fj2[j].values()[node]
    }

    /// Fast factor `(-Delta_y)^{-1} A`.
    pub fn fast_factor(&self, y: &[f64]) -> f64 {
        self.microstructure.eval_inv_laplacian_a(y)
    }
}

/// Cell mean of `A`, which must vanish before any cell inversion.
fn check_zero_mean(m: &Microstructure) -> Result<()> {
    if m.is_zero() {
        return Ok(());
    }
    let max_l = m.modes().iter().flat_map(|md| md.l.iter()).map(|k| k.unsigned_abs() as usize).max().unwrap_or(1);
    let pts = (4 * max_l + 4).min(if m.dim() > 1 { 64 } else { 4096 });
    let mean = m.cell_average(pts, |y| m.eval_a(y));
    if mean.abs() >= 1e-12 {
        return Err(Error::InvalidArgument(format!("cell source has mean {mean:.3e}; no periodic solution")));
    }
    Ok(())
}

pub fn corrector2(exp: &ExpansionSolution) -> Result<Corrector2> {
    check_zero_mean(&exp.microstructure)?;
    let g0 = exp.g0();
    let r = exp.condensate_density();
    let q = exp.excited_density();
    Ok(Corrector2 {
        microstructure: exp.microstructure.clone(),
        condensate_coeff: r.zip_map(&exp.f[0], |a, b| -g0 * a * b)?,
        excited_coeff: exp.fj[0].iter().map(|f| q.zip_map(f, |a, b| -2.0 * g0 * a * b)).collect::<Result<_>>()?,
        f2: exp.f[2].clone(),
        fj2: exp.fj[2].clone(),
    })
}

/// Fast parts of the third-order correctors; the slow part `f^3` is taken as zero.
#[derive(Debug, Clone)]
pub struct Corrector3 {
    microstructure: Microstructure,
    /// `-2 g0 grad(R f0)`, one field per axis.
    pub condensate_coeff: Vec<RealField>,
    /// `-4 g0 grad(Q fj0)`.
    pub excited_coeff: Vec<Vec<RealField>>,
}

impl Corrector3 {
    fn contract(&self, coeff: &[RealField], node: usize, y: &[f64]) -> f64 {
        let grad = self.microstructure.eval_grad_inv_laplacian_sq_a(y);
        coeff.iter().zip(&grad).map(|(c, g)| c.values()[node] * g).sum()
    }

    pub fn condensate(&self, node: usize, y: &[f64]) -> f64 {
        self.contract(&self.condensate_coeff, node, y)
    }

    pub fn excited(&self, j: usize, node: usize, y: &[f64]) -> f64 {
        self.contract(&self.excited_coeff[j], node, y)
    }
}

/// Fourth-order central gradient with zero values beyond the walls.
pub fn gradient(u: &RealField) -> Vec<RealField> {
    let grid = *u.grid();
    let n = grid.points_per_axis() as isize;
    let h = grid.spacing();
    (0..grid.dim())
        .map(|axis| {
            let stride = grid.stride(axis) as isize;
            let vals = u.values();
            let out: Vec<f64> = (0..grid.len())
                .map(|flat| {
                    let i = grid.multi_index(flat)[axis] as isize;
                    let at = |d: isize| {
                        let k = i + d;
                        if k < 0 || k >= n {
                            0.0
                        } else {
                            vals[(flat as isize + d * stride) as usize]
                        }
                    };
                    (8.0 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12.0 * h)
                })
                .collect();
            RealField::from_values(grid, out).expect("grid-sized buffer")
        })
        .collect()
}

pub fn corrector3(exp: &ExpansionSolution) -> Result<Corrector3> {
    check_zero_mean(&exp.microstructure)?;
    let g0 = exp.g0();
    let scale = |v: Vec<RealField>, s: f64| v.into_iter().map(|f| f.map(|x| s * x)).collect::<Vec<_>>();
    let rf = pointwise(&exp.condensate_density(), &exp.f[0]);
    let q = exp.excited_density();
    Ok(Corrector3 {
        microstructure: exp.microstructure.clone(),
        condensate_coeff: scale(gradient(&rf), -2.0 * g0),
        excited_coeff: exp.fj[0].iter().map(|f| scale(gradient(&pointwise(&q, f)), -4.0 * g0)).collect(),
    })
}

/// Low deflated spectrum of the order-0 excited operator, used to split
/// each indefinite corrector solve.
struct LowModes {
    vectors: Vec<RealField>,
    values: Vec<f64>,
}

fn low_modes(exp: &ExpansionSolution, h0: &LinearOperator) -> Result<LowModes> {
    let j = exp.excited_count();
    let count = (j + SPECTRAL_MARGIN).min(exp.grid().len() - 1);
    let pairs = eigensolve_with(h0, Some(&exp.f[0]), count, &EigenOptions::default(), Some(&exp.fj[0]))?;
    let mut vectors: Vec<RealField> = exp.fj[0].clone();
    let mut values: Vec<f64> = exp.mu_excited[0].clone();
    for (v, &mu) in pairs.vectors.iter().zip(&pairs.values).skip(j) {
        let mut u = v.values().to_vec();
        for b in &vectors {
            let c = dot(b.values(), &u) * exp.grid().cell_volume();
            axpy(-c, b.values(), &mut u);
        }
        let nrm = (dot(&u, &u) * exp.grid().cell_volume()).sqrt();
        u.iter_mut().for_each(|x| *x /= nrm);
        vectors.push(RealField::from_values(*exp.grid(), u)?);
        values.push(mu);
    }
    let mut all = values.clone();
    all.insert(0, exp.mu[0]);
    let mut pairs_close = Vec::new();
    let mut gap = f64::INFINITY;
    for a in 1..all.len() {
        for b in a + 1..all.len() {
            let d = (all[a] - all[b]).abs();
            if d < 1e-9 {
                pairs_close.push((a - 1, b - 1));
                gap = gap.min(d);
            }
        }
    }
    if !pairs_close.is_empty() {
        return Err(Error::Degenerate { pairs: pairs_close, gap });
    }
    Ok(LowModes { vectors, values })
}

/// Weighted orthogonal projector onto the complement of unit-norm fields.
fn projector(basis: Vec<Vec<f64>>, w: f64) -> impl Fn(&mut [f64]) {
    move |v: &mut [f64]| {
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, v) * w;
                axpy(-c, b, v);
            }
        }
    }
}

fn unit(f: &RealField) -> Vec<f64> {
    let n = f.norm();
    f.values().iter().map(|x| x / n).collect()
}

/// Inputs of the cell-averaged second-order equations that change each sweep.
struct SecondOrderTerms {
    rs2: RealField,
    rn2: RealField,
}

fn second_order_densities(exp: &ExpansionSolution, act: &[bool]) -> SecondOrderTerms {
    let grid = *exp.grid();
    let (xi0, xi2) = (exp.xi[0], exp.xi[2]);
    let rs2 = exp.f[0].zip_map(&exp.f[2], |a, b| xi2 * a * a + 2.0 * xi0 * a * b).expect("same grid");
    let mut rn2 = vec![0.0; grid.len()];
    for k in 0..exp.excited_count() {
        if !act[k] {
            continue;
        }
        let (n0, n2) = (exp.occupations[0][k], exp.occupations[2][k]);
        let (a, b) = (exp.fj[0][k].values(), exp.fj[2][k].values());
        for i in 0..grid.len() {
            rn2[i] += n2 * a[i] * a[i] + 2.0 * n0 * a[i] * b[i];
        }
    }
    SecondOrderTerms { rs2, rn2: RealField::from_values(grid, rn2).expect("grid-sized buffer") }
}

/// Second-order slice by a damped fixed point over `(f2, fj2, xi2, z2, nj2)`.
pub fn order2_solve(exp: &mut ExpansionSolution, opts: &FixedPointOptions) -> Result<()> {
    check_zero_mean(&exp.microstructure)?;
    let grid = *exp.grid();
    let w = grid.cell_volume();
    let j = exp.excited_count();
    let n = exp.particles;
    let g0 = exp.g0();
    let a2 = exp.a_norm_sq;
    let act = active(&exp.occupations[0]);
    let gconst = RealField::constant(grid, g0);
    let l0 = condensate_operator(&exp.base, &gconst, &exp.rho_s[0], &exp.rho_n[0])?;
    let h0 = excited_operator(&exp.base, &gconst, &exp.rho_s[0], &exp.rho_n[0])?;
    let r = exp.condensate_density();
    let q = exp.excited_density();
    // fast-mode forcing, sign from the cell average of A (-Delta)^{-1} A
    let wc = r.zip_map(&exp.rho_bar_s2, |r, s| g0 * g0 * a2 * r * r + g0 * g0 * a2 * s)?.zip_map(&exp.rho_bar_n2, |x, bn| x + 2.0 * g0 * g0 * a2 * bn)?;
    let wj = q.zip_map(&exp.rho_bar_s2, |q, s| 4.0 * g0 * g0 * a2 * q * q + 2.0 * g0 * g0 * a2 * s)?.zip_map(&exp.rho_bar_n2, |x, bn| x + 2.0 * g0 * g0 * a2 * bn)?;

    let modes = if j > 0 { Some(low_modes(exp, &h0)?) } else { None };

    // condensate operator K = L0 + 2 g0 rho_s0 - mu0 on f0-perp, SPD
    let k_pot: Vec<f64> = (0..grid.len()).map(|i| l0.potential()[i] + 2.0 * g0 * exp.rho_s[0].values()[i] - exp.mu[0]).collect();
    let k_op = l0.with_potential(k_pot)?;
    let k_shift = k_op.min_potential() - 1.0;
    let k_pre = k_op.shifted_solver(k_shift)?;
    let p0 = projector(vec![unit(&exp.f[0])], w);

    let h_shift = h0.min_potential() - 1.0;
    let h_pre = h0.shifted_solver(h_shift)?;
    let hf0 = h0.apply(exp.f[0].values());
    let pcg_opts = PcgOptions { rel_tol: 1e-13, max_iter: 20_000 };

    let thermo = exp.thermo.clone();
    let t1 = match &thermo {
        Some(t) => Some(solve_xi_z_order1(t, 0.0, &vec![0.0; j])?),
        None => None,
    };
    let alpha = opts.damping;
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    let mut history = Vec::new();
    for sweep in 1..=opts.max_sweeps {
        exp.sweeps = sweep;
        let terms = second_order_densities(exp, &act);
        // f2 on f0-perp
        let rhs: Vec<f64> = (0..grid.len())
            .map(|i| {
                let f0 = exp.f[0].values()[i];
                (wc.values()[i] - g0 * exp.xi[2] * f0 * f0 - 2.0 * g0 * terms.rn2.values()[i]) * f0
            })
            .collect();
        let f2_new = pcg(
            |x| k_op.apply(x),
            |x| k_pre.solve(x).expect("factorised preconditioner"),
            &p0,
            &rhs,
            Some(exp.f[2].values()),
            &pcg_opts,
        )?
        .solution;
        let f2_new = RealField::from_values(grid, f2_new)?;
        let rs2_new = exp.f[0].zip_map(&f2_new, |a, b| exp.xi[2] * a * a + 2.0 * exp.xi[0] * a * b)?;
        let mu2 = -(0..grid.len())
            .map(|i| {
                let f0 = exp.f[0].values()[i];
                (wc.values()[i] - g0 * (rs2_new.values()[i] + 2.0 * terms.rn2.values()[i])) * f0 * f0
            })
            .sum::<f64>()
            * w
            / n;

        // excited correctors
        let mut fj2_new = Vec::with_capacity(j);
        let mut muj2 = Vec::with_capacity(j);
        let mut bj2 = Vec::with_capacity(j);
        if let Some(m) = &modes {
            let basis: Vec<Vec<f64>> = std::iter::once(unit(&exp.f[0])).chain(m.vectors.iter().map(|v| v.values().to_vec())).collect();
            let pc = projector(basis, w);
            for k in 0..j {
                let fj0 = exp.fj[0][k].values();
                let mu0 = exp.mu_excited[0][k];
                let b0 = exp.b[0][k];
                let sj: Vec<f64> = (0..grid.len())
                    .map(|i| (wj.values()[i] - 2.0 * g0 * (rs2_new.values()[i] + terms.rn2.values()[i])) * fj0[i])
                    .collect();
                let f2_fj0 = dot(f2_new.values(), fj0) * w;
                let mu_j2 = -dot(fj0, &sj) * w - 2.0 * b0 * f2_fj0;
                let aj = -f2_fj0 / n;
                // q = P[b0 f2 + S_j + mu_j2 fj0 - aj (H0 - mu0) f0]
                let mut qv: Vec<f64> = (0..grid.len())
                    .map(|i| b0 * f2_new.values()[i] + sj[i] + mu_j2 * fj0[i] - aj * (hf0[i] - mu0 * exp.f[0].values()[i]))
                    .collect();
                p0(&mut qv);
                let mut wv = vec![0.0; grid.len()];
                for (kk, (v, &mk)) in m.vectors.iter().zip(&m.values).enumerate() {
                    if kk == k {
                        continue;
                    }
                    let c = dot(v.values(), &qv) * w / (mk - mu0);
                    axpy(c, v.values(), &mut wv);
                }
                let guess: Vec<f64> = {
                    let mut g = exp.fj[2][k].values().to_vec();
                    pc(&mut g);
                    g
                };
                let u = pcg(
                    |x| {
                        let mut y = h0.apply(x);
                        axpy(-mu0, x, &mut y);
                        y
                    },
                    |x| h_pre.solve(x).expect("factorised preconditioner"),
                    &pc,
                    &qv,
                    Some(&guess),
                    &pcg_opts,
                )?
                .solution;
                axpy(1.0, &u, &mut wv);
                axpy(aj, exp.f[0].values(), &mut wv);
                let fj2 = RealField::from_values(grid, wv)?;
                // b_j2 from the f0 component
                let mut hv = h0.apply(fj2.values());
                axpy(-mu0, fj2.values(), &mut hv);
                let b = (dot(exp.f[0].values(), &hv) * w - dot(exp.f[0].values(), &sj) * w - b0 * dot(exp.f[0].values(), f2_new.values()) * w) / n;
                fj2_new.push(fj2);
                muj2.push(mu_j2);
                bj2.push(b);
            }
        }

        let (xi2, z2, nj2) = match (&thermo, &t1) {
            (Some(t), Some(o1)) => {
                let o2 = solve_xi_z_order2(t, o1, mu2, &muj2)?;
                (o2.xi, o2.z_ratio, o2.occupations)
            }
            _ => (0.0, 0.0, vec![0.0; j]),
        };

        let mut change = sup_diff(&f2_new, &exp.f[2]).max((xi2 - exp.xi[2]).abs() * n);
        for k in 0..j {
            change = change.max(sup_diff(&fj2_new[k], &exp.fj[2][k]));
            change = change.max((nj2[k] - exp.occupations[2][k]).abs());
        }
        history.push(change);
        last_change = change;
        let a = if sweep == 1 { 1.0 } else { alpha };
        let mix = |new: &RealField, old: &RealField| new.zip_map(old, |x, y| a * x + (1.0 - a) * y).expect("same grid");
        let done = change < opts.tol;
        if done {
            exp.f[2] = f2_new;
            exp.fj[2] = fj2_new;
            exp.xi[2] = xi2;
            exp.z_ratio[2] = z2;
            exp.occupations[2] = nj2;
            exp.mu[2] = mu2;
            exp.mu_excited[2] = muj2;
            exp.b[2] = bj2;
            converged = true;
            break;
        }
        exp.f[2] = mix(&f2_new, &exp.f[2]);
        for k in 0..j {
            exp.fj[2][k] = mix(&fj2_new[k], &exp.fj[2][k]);
            exp.occupations[2][k] = a * nj2[k] + (1.0 - a) * exp.occupations[2][k];
        }
        exp.xi[2] = a * xi2 + (1.0 - a) * exp.xi[2];
        exp.z_ratio[2] = z2;
        exp.mu[2] = mu2;
        exp.mu_excited[2] = muj2;
        exp.b[2] = bj2;
    }
    if !converged {
        return Err(Error::Divergence { what: "second-order fixed point".into(), iterations: opts.max_sweeps, last_change, history });
    }
    let terms = second_order_densities(exp, &act);
    exp.rho_s[2] = terms.rs2;
    exp.rho_n[2] = terms.rn2;
    exp.b2_integral = coupling_integral(exp);
    energy_expansion(exp);
    Ok(())
}

/// `b_j^(2)` from the cell-averaged expansion of `N^-1 xi int g Phi^3 phi_j`.
pub fn coupling_integral(exp: &ExpansionSolution) -> Vec<f64> {
    let g0 = exp.g0();
    let a2 = exp.a_norm_sq;
    let f0 = &exp.f[0];
    let f0_3 = f0.map(|x| x.powi(3));
    let f0_2 = f0.map(|x| x * x);
    let weight = exp.rho_s[0].zip_map(&exp.rho_n[0], |s, n| 5.0 * s + 8.0 * n).expect("same grid");
    let wf = pointwise(&weight, &f0_3);
    (0..exp.excited_count())
        .map(|k| {
            let fj0 = &exp.fj[0][k];
            let fj1 = &exp.fj[1][k];
            let fj2 = &exp.fj[2][k];
            let f1 = &exp.f[1];
            let x0 = w_inner(&f0_3, fj2)
                + 3.0 * (w_inner(&f0_2, &pointwise(f1, fj1)) + w_inner(&pointwise(f1, f1), &pointwise(f0, fj0)) + w_inner(&pointwise(&f0_2, fj0), &exp.f[2]))
                - g0 * a2 * w_inner(fj0, &wf);
            let x1 = w_inner(&f0_3, fj1) + 3.0 * w_inner(&pointwise(&f0_2, fj0), f1);
            g0 / exp.particles * (exp.xi[0] * x0 + exp.xi[1] * x1 + exp.xi[2] * w_inner(&f0_3, fj0))
        })
        .collect()
}

/// Residuals of the second-order equations and constraints from stored slices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondOrderResiduals {
    pub condensate: f64,
    pub excited: Vec<f64>,
    /// `<f0, f2>`.
    pub condensate_orthogonality: f64,
    /// `<fj0, fj2>`.
    pub excited_normalisation: Vec<f64>,
    /// `<f0, fj2> + <f2, fj0>`.
    pub cross_orthogonality: Vec<f64>,
    /// `N xi2 + sum n_j2`.
    pub number: f64,
    /// Projection minus integral formula for `b_j^(2)`.
    pub coupling_mismatch: Vec<f64>,
}

impl SecondOrderResiduals {
    pub fn max(&self) -> f64 {
        let mut m = self.condensate.abs().max(self.condensate_orthogonality.abs()).max(self.number.abs());
        for v in [&self.excited, &self.excited_normalisation, &self.cross_orthogonality] {
            m = v.iter().fold(m, |a, b| a.max(b.abs()));
        }
        m
    }
}

pub fn order2_residuals(exp: &ExpansionSolution) -> Result<SecondOrderResiduals> {
    let grid = *exp.grid();
    let w = grid.cell_volume();
    let g0 = exp.g0();
    let a2 = exp.a_norm_sq;
    let gconst = RealField::constant(grid, g0);
    let l0 = condensate_operator(&exp.base, &gconst, &exp.rho_s[0], &exp.rho_n[0])?;
    let h0 = excited_operator(&exp.base, &gconst, &exp.rho_s[0], &exp.rho_n[0])?;
    let (rs0, rn0) = (exp.rho_s[0].values(), exp.rho_n[0].values());
    let (rs2, rn2) = (exp.rho_s[2].values(), exp.rho_n[2].values());
    let (bs, bn) = (exp.rho_bar_s2.values(), exp.rho_bar_n2.values());
    let f0 = exp.f[0].values();
    let norm = |v: &[f64]| (dot(v, v) * w).sqrt();

    let mut r = l0.apply(exp.f[2].values());
    axpy(-exp.mu[0], exp.f[2].values(), &mut r);
    for i in 0..grid.len() {
        let rr = rs0[i] + 2.0 * rn0[i];
        let coeff = g0 * g0 * a2 * rr * rr + g0 * g0 * a2 * (bs[i] + 2.0 * bn[i]) - g0 * (rs2[i] + 2.0 * rn2[i]) + exp.mu[2];
        r[i] -= coeff * f0[i];
    }
    let condensate = norm(&r);
    let mut excited = Vec::new();
    let mut excited_normalisation = Vec::new();
    let mut cross = Vec::new();
    for k in 0..exp.excited_count() {
        let fj0 = exp.fj[0][k].values();
        let fj2 = exp.fj[2][k].values();
        let mut r = h0.apply(fj2);
        axpy(-exp.mu_excited[0][k], fj2, &mut r);
        axpy(-exp.b[0][k], exp.f[2].values(), &mut r);
        axpy(-exp.b[2][k], f0, &mut r);
        for i in 0..grid.len() {
            let qq = rs0[i] + rn0[i];
            let coeff = 4.0 * g0 * g0 * a2 * qq * qq + 2.0 * g0 * g0 * a2 * (bs[i] + bn[i]) - 2.0 * g0 * (rs2[i] + rn2[i]) + exp.mu_excited[2][k];
            r[i] -= coeff * fj0[i];
        }
        excited.push(norm(&r));
        excited_normalisation.push(dot(fj0, fj2) * w);
        cross.push((dot(f0, fj2) + dot(exp.f[2].values(), fj0)) * w);
    }
    let number = exp.particles * exp.xi[2] + exp.occupations[2].iter().sum::<f64>();
    let coupling_mismatch = exp.b[2].iter().zip(&exp.b2_integral).map(|(a, b)| a - b).collect();
    Ok(SecondOrderResiduals {
        condensate,
        excited,
        condensate_orthogonality: dot(f0, exp.f[2].values()) * w,
        excited_normalisation,
        cross_orthogonality: cross,
        number,
        coupling_mismatch,
    })
}

/// Fills `zeta^(k)`, `E^(k)`, `E_j^(k)` and the total-energy coefficients.
pub fn energy_expansion(exp: &mut ExpansionSolution) {
    let w = exp.grid().cell_volume();
    let g0 = exp.g0();
    let a2 = exp.a_norm_sq;
    let n = exp.particles;
    let f0 = exp.f[0].values();
    let f1 = exp.f[1].values();
    let f2 = exp.f[2].values();
    let r = exp.condensate_density();
    let sum = |f: &dyn Fn(usize) -> f64| (0..f0.len()).map(f).sum::<f64>() * w;
    let z0 = g0 / n * sum(&|i| f0[i].powi(4));
    let z1 = g0 / n * 4.0 * sum(&|i| f1[i] * f0[i].powi(3));
    let z2 = g0 / n
        * (4.0 * sum(&|i| f2[i] * f0[i].powi(3)) + 6.0 * sum(&|i| (f1[i] * f0[i]).powi(2))
            - 4.0 * g0 * a2 * sum(&|i| r.values()[i] * f0[i].powi(4)));
    exp.zeta = [z0, z1, z2];
    let [x0, x1, x2] = exp.xi;
    let shift = [0.5 * x0 * x0 * z0, 0.5 * (x0 * x0 * z1 + 2.0 * x0 * x1 * z0), 0.5 * (x0 * x0 * z2 + 2.0 * x0 * x1 * z1 + (2.0 * x0 * x2 + x1 * x1) * z0)];
    for k in 0..3 {
        exp.energy[k] = exp.mu[k] - shift[k];
        exp.energy_excited[k] = exp.mu_excited[k].iter().map(|m| m - shift[k]).collect();
    }
    let ip = |a: &RealField, b: &RealField| w_inner(a, b);
    let (rs, rn) = (&exp.rho_s, &exp.rho_n);
    let nj = &exp.occupations;
    let ej = &exp.energy_excited;
    let dotj = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let e = &exp.energy;
    let t0 = n * x0 * e[0] + dotj(&nj[0], &ej[0]) - 2.0 * g0 * ip(&rs[0], &rn[0]) - g0 * ip(&rn[0], &rn[0]);
    let t1 = n * (x0 * e[1] + x1 * e[0]) + dotj(&nj[0], &ej[1]) + dotj(&nj[1], &ej[0])
        - 2.0 * g0 * (ip(&rn[1], &rs[0]) + ip(&rs[1], &rn[0]) + ip(&rn[0], &rn[1]));
    let t2 = n * (x0 * e[2] + x1 * e[1] + x2 * e[0]) + dotj(&nj[0], &ej[2]) + dotj(&nj[1], &ej[1]) + dotj(&nj[2], &ej[0])
        - 2.0 * g0
            * (ip(&rn[0], &rs[2]) + ip(&rs[1], &rn[1]) + ip(&rs[0], &rn[2]) + ip(&rn[2], &rn[0]) + 0.5 * ip(&rn[1], &rn[1])
                - g0 * a2 * (ip(&rn[0], &exp.rho_bar_s2) + ip(&rs[0], &exp.rho_bar_n2) + ip(&rn[0], &exp.rho_bar_n2)));
    exp.total_energy = [t0, t1, t2];
}

/// Two-scale reconstruction at period `eps`, truncated after order 0, 2 or 3.
pub fn reconstruct(exp: &ExpansionSolution, eps: f64, order: usize) -> Result<(RealField, Vec<RealField>)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon = {eps} must be positive")));
    }
    let grid = *exp.grid();
    match order {
        0 => return Ok((exp.f[0].clone(), exp.fj[0].clone())),
        2 | 3 => {}
        k => return Err(Error::InvalidArgument(format!("reconstruction order {k} is not 0, 2 or 3"))),
    }
    if exp.sweeps == 0 && !exp.microstructure.is_zero() {
        return Err(Error::MissingSlice("second-order slice not computed".into()));
    }
    let c2 = corrector2(exp)?;
    let c3 = if order == 3 { Some(corrector3(exp)?) } else { None };
    let d = exp.microstructure.dim();
    let cell = |x: &[f64]| (0..d).map(|a| x.get(a).copied().unwrap_or(0.0) / eps).collect::<Vec<f64>>();
    let nodes: Vec<Vec<f64>> = grid.nodes().map(|x| cell(&x[..grid.dim()])).collect();
    let build = |base: &RealField, f: &dyn Fn(usize, &[f64]) -> f64| {
        let v: Vec<f64> = (0..grid.len()).map(|i| base.values()[i] + f(i, &nodes[i])).collect();
        RealField::from_values(grid, v).expect("grid-sized buffer")
    };
    let e2 = eps * eps;
    let e3 = e2 * eps;
    let phi = build(&exp.f[0], &|i, y| e2 * c2.condensate(i, y) + c3.as_ref().map_or(0.0, |c| e3 * c.condensate(i, y)));
    let excited = (0..exp.excited_count())
        .map(|j| build(&exp.fj[0][j], &|i, y| e2 * c2.excited(j, i, y) + c3.as_ref().map_or(0.0, |c| e3 * c.excited(j, i, y))))
        .collect();
    Ok((phi, excited))
}

/// Full expansion: order 0 from the configuration, then orders 1 and 2.
pub fn expand(cfg: &ScfConfig) -> Result<ExpansionSolution> {
    let mut exp = order0_solve(cfg)?;
    order1_solve(&mut exp)?;
    order2_solve(&mut exp, &FixedPointOptions::default())?;
    Ok(exp)
}

/// One member of an epsilon sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub points: usize,
    pub err_order0: f64,
    pub err_order2: f64,
    pub err_order3: f64,
    pub energy_eps: f64,
    pub energy_expansion: f64,
}

impl SweepRow {
    pub fn energy_remainder(&self) -> f64 {
        (self.energy_eps - self.energy_expansion).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub slope_order0: f64,
    pub slope_order2: f64,
    pub slope_order3: f64,
    pub slope_energy: f64,
}

/// Grid points for period `eps` at `m` points per period on `[-L, L]`.
pub fn sweep_points(half_width: f64, eps: f64, m: usize) -> Result<usize> {
    let exact = 2.0 * half_width * m as f64 / eps;
    let n = exact.round();
    if (n - exact).abs() > 1e-6 * exact || n < 8.0 || (n as usize) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "2L m / eps = {exact} is not an even integer; choose eps dividing 2L"
        )));
    }
    Ok(n as usize)
}

/// Compares the oscillatory stationary state with the reconstructions at one `eps`.
pub fn sweep_member(cfg: &ScfConfig, eps: f64, points_per_period: usize) -> Result<SweepRow> {
    let mut c = cfg.clone();
    c.grid.points = sweep_points(cfg.grid.half_width, eps, points_per_period)?;
    c.epsilon = Some(eps);
    let full = full_epsilon_solve(&c)?;
    let exp = expand(&c)?;
    let err = |order: usize| -> Result<f64> {
        let (phi, _) = reconstruct(&exp, eps, order)?;
        Ok(sup_diff(&phi, &full.phi))
    };
    let t = &exp.total_energy;
    Ok(SweepRow {
        epsilon: eps,
        points: c.grid.points,
        err_order0: err(0)?,
        err_order2: err(2)?,
        err_order3: err(3)?,
        energy_eps: full.energy,
        energy_expansion: t[0] + eps * t[1] + eps * eps * t[2],
    })
}

/// Runs every `eps` concurrently and fits log-log slopes of the errors.
pub fn epsilon_sweep(cfg: &ScfConfig, epsilons: &[f64], points_per_period: usize) -> Result<SweepReport> {
    if epsilons.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least two epsilons".into()));
    }
    let results: Vec<Result<SweepRow>> = thread::scope(|s| {
        let handles: Vec<_> = epsilons.iter().map(|&e| s.spawn(move || sweep_member(cfg, e, points_per_period))).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Instability("sweep worker panicked".into())))).collect()
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let slope = |f: &dyn Fn(&SweepRow) -> f64| {
        let ys: Vec<f64> = rows.iter().map(f).collect();
        log_log_slope(&eps, &ys).unwrap_or(f64::NAN)
    };
    Ok(SweepReport {
        slope_order0: slope(&|r| r.err_order0),
        slope_order2: slope(&|r| r.err_order2),
        slope_order3: slope(&|r| r.err_order3),
        slope_energy: slope(&|r| r.energy_remainder()),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GridSpec, ModeSpec};
    use crate::operator::StencilOrder;
    use std::f64::consts::PI;

    fn small(micro: Microstructure) -> ScfConfig {
        let mut c = ScfConfig::desk();
        c.grid = GridSpec { dim: 1, half_width: 8.0, points: 256, stencil: StencilOrder::Fourth };
        c.microstructure = micro;
        c.thermo.excited_states = 4;
        c.tol_density = 1e-10;
        c
    }

    #[test]
    fn order0_matches_constant_coupling_solve() {
        let cfg = small(Microstructure::cosine(0.1, 0.5).unwrap());
        let exp = order0_solve(&cfg).unwrap();
        let mut c = cfg.clone();
        c.microstructure = Microstructure::uniform(0.1).unwrap();
        let sol = scf_solve(&c).unwrap();
        assert_eq!(exp.f[0].values(), sol.phi.values());
        assert_eq!(exp.mu[0], sol.mu);
        let f0_3 = exp.f[0].map(|x| x.powi(3));
        for k in 0..4 {
            let b = exp.xi[0] * 0.1 * w_inner(&f0_3, &exp.fj[0][k]) / exp.particles;
            assert!((b - exp.b[0][k]).abs() < 1e-12 * (1.0 + b.abs()));
        }
        // odd states decouple in a symmetric trap
        assert!(exp.b[0][0].abs() < 1e-12 && exp.b[0][2].abs() < 1e-12);
        assert!((exp.total_energy[0] - sol.energy).abs() < 1e-9 * sol.energy.abs());
    }

    #[test]
    fn first_order_branch_vanishes() {
        let cfg = small(Microstructure::cosine(0.1, 0.5).unwrap());
        let mut exp = order0_solve(&cfg).unwrap();
        let check = order1_solve(&mut exp).unwrap();
        assert_eq!(check.condensate_residual, 0.0);
        assert_eq!(check.thermo_xi, 0.0);
        assert_eq!(check.coupling, 0.0);
        assert_eq!(exp.zeta[1], 0.0);
        assert_eq!(exp.total_energy[1], 0.0);
    }

    #[test]
    fn uniform_coupling_has_zero_second_order() {
        let cfg = small(Microstructure::uniform(0.1).unwrap());
        let exp = expand(&cfg).unwrap();
        assert!(exp.f[2].sup_norm() < 1e-12);
        assert!(exp.mu[2].abs() < 1e-12 && exp.xi[2].abs() < 1e-14);
        assert!(exp.fj[2].iter().all(|f| f.sup_norm() < 1e-11));
        let c2 = corrector2(&exp).unwrap();
        assert_eq!(c2.fast_factor(&[0.3]), 0.0);
    }

    #[test]
    fn second_order_equations_hold() {
        let cfg = small(Microstructure::cosine(0.1, 0.5).unwrap());
        let exp = expand(&cfg).unwrap();
        let r = order2_residuals(&exp).unwrap();
        assert!(r.max() < 1e-9, "{r:?}");
        for m in &r.coupling_mismatch {
            assert!(m.abs() < 1e-8, "{r:?}");
        }
        assert!(exp.mu[2] != 0.0);
    }

    #[test]
    fn frozen_occupations_have_no_thermal_corrections() {
        let mut cfg = small(Microstructure::cosine(0.1, 0.5).unwrap());
        cfg.mode = ModeSpec::Frozen { xi: 0.9, occupations: vec![2.0, 1.5, 1.0, 0.5] };
        let exp = expand(&cfg).unwrap();
        assert_eq!(exp.xi[2], 0.0);
        assert!(exp.occupations[2].iter().all(|n| *n == 0.0));
        assert!(order2_residuals(&exp).unwrap().max() < 1e-9);
    }

    #[test]
    fn single_mode_fast_factors() {
        let cfg = small(Microstructure::cosine(0.1, 1.0).unwrap());
        let exp = order0_solve(&cfg).unwrap();
        let c2 = corrector2(&exp).unwrap();
        for y in [0.0, 0.17, 0.5] {
            assert!((c2.fast_factor(&[y]) - (2.0 * PI * y).cos() / (4.0 * PI * PI)).abs() < 1e-15);
        }
        // cell average leaves the slow part
        let i = 128;
        let avg = exp.microstructure.cell_average(64, |y| c2.condensate(i, y));
        assert!((avg - exp.f[2].values()[i]).abs() < 1e-14);
        // constant slow factor: no third-order fast part in the interior
        let mut synth = exp.clone();
        synth.rho_s[0] = RealField::constant(*exp.grid(), 1.0);
        synth.rho_n[0] = RealField::zeros(*exp.grid());
        synth.f[0] = RealField::constant(*exp.grid(), 2.0);
        let c3 = corrector3(&synth).unwrap();
        assert!(c3.condensate(100, &[0.3]).abs() < 1e-12);
        let m = &exp.microstructure;
        let g = m.eval_grad_inv_laplacian_sq_a(&[0.2]);
        assert!((g[0] + 2.0 * PI * (2.0 * PI * 0.2).sin() / (16.0 * PI.powi(4))).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_fourth_order() {
        let errs: Vec<f64> = [64usize, 128, 256]
            .iter()
            .map(|&n| {
                let g = Grid::new(1, 8.0, n).unwrap();
                let u = RealField::from_fn(g, |x| (-x[0] * x[0]).exp());
                let d = gradient(&u).remove(0);
                let exact = RealField::from_fn(g, |x| -2.0 * x[0] * (-x[0] * x[0]).exp());
                sup_diff(&d, &exact)
            })
            .collect();
        let slope = log_log_slope(&[1.0, 0.5, 0.25], &errs).unwrap();
        assert!(slope > 3.7, "{slope}");
    }

    #[test]
    fn reconstruction_orders() {
        let cfg = small(Microstructure::cosine(0.1, 0.5).unwrap());
        let exp = expand(&cfg).unwrap();
        let (p0, _) = reconstruct(&exp, 0.125, 0).unwrap();
        let (p2, _) = reconstruct(&exp, 0.125, 2).unwrap();
        assert_eq!(p0.values(), exp.f[0].values());
        let c2 = corrector2(&exp).unwrap();
        let x = exp.grid().node(77)[0];
        let expect = 0.125f64.powi(2) * c2.condensate(77, &[x / 0.125]);
        assert!((p2.values()[77] - p0.values()[77] - expect).abs() < 1e-14);
        assert!(reconstruct(&exp, 0.125, 1).is_err());
        let (tiny, _) = reconstruct(&exp, 1e-6, 3).unwrap();
        assert!(sup_diff(&tiny, &exp.f[0]) < 1e-9);
    }

    #[test]
    fn sweep_grid_sizes() {
        assert_eq!(sweep_points(8.0, 0.125, 16).unwrap(), 2048);
        assert!(sweep_points(8.0, 0.3, 16).is_err());
    }
}
