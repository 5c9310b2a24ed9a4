//! Stationary condensate and thermal cloud, closed self-consistently.
//!
//! The condensate solves `(-Delta + V + g(rho_s + 2 rho_n)) Phi = mu Phi` with
//! `||Phi||^2 = N`; the excited states solve
//! `(-Delta + V + 2g(rho_s + rho_n)) phi_j = mu_j phi_j + b_j Phi` on the
//! complement of `Phi`. Occupations come from the Bose-Einstein closure or are
//! held fixed.

use crate::config::{ModeSpec, ScfConfig};
use crate::eigen::{eigensolve_with, EigenOptions};
use crate::error::{Error, Result};
use crate::grid::{axpy, dot, Grid, RealField};
use crate::operator::LinearOperator;
use serde::Serialize;

use crate::thermo::{solve_xi_z_order0, ThermoState};

/// Occupations below this are left out of the normal density.
pub const OCCUPATION_CUTOFF: f64 = 1e-8;

/// Diluteness level above which a warning is logged.
pub const DILUTENESS_WARNING: f64 = 0.1;

/// Residual level that rounding alone produces for an operator of this norm.
pub fn residual_floor(op: &LinearOperator) -> f64 {
    64.0 * f64::EPSILON * op.norm_estimate()
}

#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    /// Target for `||H Phi - mu Phi||`.
    pub tol: f64,
    pub max_steps: usize,
    pub dt0: f64,
    pub dt_max: f64,
}

impl FlowOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_steps: 20_000, dt0: 1.0, dt_max: 1e4 }
    }
}

fn check_field_grid(grid: &Grid, f: &RealField) -> Result<()> {
    grid.check_same(f.grid())
}

/// Condensate potential `V + g (xi Phi^2 + 2 rho_n)`.
fn condensate_potential(v: &[f64], g: &[f64], phi: &[f64], xi: f64, rho_n: &[f64]) -> Vec<f64> {
    (0..v.len()).map(|i| v[i] + g[i] * (xi * phi[i] * phi[i] + 2.0 * rho_n[i])).collect()
}

/// Normalised gradient flow for the condensate at fixed `rho_n` and `xi`.
///
/// Each step solves `(I + dt H[Phi_n]) Phi* = Phi_n` and rescales to `||Phi||^2 = N`.
/// Steps that raise the energy are retried with half the step.
pub fn solve_condensate(
    base: &LinearOperator,
    g: &RealField,
    rho_n: &RealField,
    xi: f64,
    particles: f64,
    opts: &FlowOptions,
    guess: Option<&RealField>,
) -> Result<(RealField, f64)> {
    let grid = *base.grid();
    check_field_grid(&grid, g)?;
    check_field_grid(&grid, rho_n)?;
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::InvalidArgument(format!("condensate fraction {xi} outside (0, 1]")));
    }
    if !(particles > 0.0) {
        return Err(Error::InvalidArgument(format!("particle number {particles} must be positive")));
    }
    if let Some(m) = g.values().iter().cloned().reduce(f64::min).filter(|m| *m < 0.0) {
        return Err(Error::NonPositiveCoupling(m));
    }
    if rho_n.values().iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidArgument("normal density has negative entries".into()));
    }
    let w = grid.cell_volume();
    let v = base.potential();
    let (gv, rn) = (g.values(), rho_n.values());
    let normalize = |u: &mut Vec<f64>| {
        let s = (particles / (dot(u, u) * w)).sqrt();
        u.iter_mut().for_each(|x| *x *= s);
    };
    let energy = |u: &[f64]| {
        let pot: f64 = (0..u.len())
            .map(|i| (v[i] + 2.0 * gv[i] * rn[i] + 0.5 * xi * gv[i] * u[i] * u[i]) * u[i] * u[i])
            .sum();
        base.kinetic_energy(u) + pot * w
    };

    let mut phi: Vec<f64> = match guess {
        Some(f) if f.grid() == &grid && f.norm_sq() > 0.0 => f.values().to_vec(),
        _ => grid.nodes().map(|x| (-0.5 * x[..grid.dim()].iter().map(|a| a * a).sum::<f64>()).exp()).collect(),
    };
    normalize(&mut phi);
    let mut e = energy(&phi);
    let mut dt = opts.dt0;
    let mut last_res = f64::INFINITY;
    for _ in 0..opts.max_steps {
        let op = base.with_potential(condensate_potential(v, gv, &phi, xi, rn))?;
        let hphi = op.apply(&phi);
        let mu = op.quadratic_form(&phi) / particles;
        let mut r = hphi;
        axpy(-mu, &phi, &mut r);
        let res = (dot(&r, &r) * w).sqrt();
        last_res = res;
        let tol = opts.tol.max(residual_floor(&op) * particles.sqrt());
        if res <= tol {
            fix_positive(&mut phi);
            return Ok((RealField::from_values(grid, phi)?, mu));
        }
        let mut fails = 0;
        loop {
            let rhs: Vec<f64> = phi.iter().map(|x| x / dt).collect();
            let mut cand = op.shifted_solver(-1.0 / dt)?.solve(&rhs)?;
            normalize(&mut cand);
            let ec = energy(&cand);
            if ec <= e + 1e-13 * e.abs() {
                phi = cand;
                e = ec;
                dt = (1.5 * dt).min(opts.dt_max);
                break;
            }
            fails += 1;
            if fails >= 5 {
                return Err(Error::StepSize(format!(
                    "energy rose on 5 consecutive attempts (dt = {dt:.3e}, E = {e:.12e})"
                )));
            }
            dt *= 0.5;
        }
    }
    Err(Error::Divergence { what: "condensate gradient flow".into(), iterations: opts.max_steps, last_change: last_res, history: vec![] })
}

fn fix_positive(phi: &mut [f64]) {
    if phi.iter().sum::<f64>() < 0.0 {
        phi.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Excited states with their coupling scalars.
#[derive(Debug, Clone)]
pub struct ExcitedStates {
    pub vectors: Vec<RealField>,
    pub values: Vec<f64>,
    /// `b_j = N^-1 xi int g Phi^3 phi_j`.
    pub couplings: Vec<f64>,
    /// `||H_phi phi_j - mu_j phi_j - b_j Phi||`.
    pub residuals: Vec<f64>,
}

/// Lowest `count` eigenpairs of `-Delta + V + 2g(rho_s + rho_n)` orthogonal to `Phi`.
#[allow(clippy::too_many_arguments)]
pub fn solve_excited(
    base: &LinearOperator,
    phi: &RealField,
    g: &RealField,
    rho_s: &RealField,
    rho_n: &RealField,
    count: usize,
    tol: f64,
    guess: Option<&[RealField]>,
) -> Result<ExcitedStates> {
    let grid = *base.grid();
    for f in [phi, g, rho_s, rho_n] {
        check_field_grid(&grid, f)?;
    }
    let particles = phi.norm_sq();
    if !(particles > 0.0) {
        return Err(Error::InvalidArgument("condensate has zero norm".into()));
    }
    let op = excited_operator(base, g, rho_s, rho_n)?;
    let scale = op.norm_estimate();
    let opts = EigenOptions { residual_tol: (tol / scale).max(64.0 * f64::EPSILON), ..Default::default() };
    let pairs = eigensolve_with(&op, Some(phi), count, &opts, guess)?;
    pairs.check_nondegenerate()?;
    let w = grid.cell_volume();
    let cubic: Vec<f64> = (0..grid.len()).map(|i| g.values()[i] * rho_s.values()[i] * phi.values()[i]).collect();
    let mut couplings = Vec::with_capacity(count);
    let mut residuals = Vec::with_capacity(count);
    for (v, &mu) in pairs.vectors.iter().zip(&pairs.values) {
        let b = dot(&cubic, v.values()) * w / particles;
        let mut r = op.apply(v.values());
        axpy(-mu, v.values(), &mut r);
        axpy(-b, phi.values(), &mut r);
        couplings.push(b);
        residuals.push((dot(&r, &r) * w).sqrt());
    }
    Ok(ExcitedStates { vectors: pairs.vectors, values: pairs.values, couplings, residuals })
}

/// `-Delta + V + 2 g (rho_s + rho_n)`.
pub fn excited_operator(base: &LinearOperator, g: &RealField, rho_s: &RealField, rho_n: &RealField) -> Result<LinearOperator> {
    let v = base.potential();
    let (gv, s, n) = (g.values(), rho_s.values(), rho_n.values());
    base.with_potential((0..v.len()).map(|i| v[i] + 2.0 * gv[i] * (s[i] + n[i])).collect())
}

/// `-Delta + V + g (rho_s + 2 rho_n)`.
pub fn condensate_operator(base: &LinearOperator, g: &RealField, rho_s: &RealField, rho_n: &RealField) -> Result<LinearOperator> {
    let v = base.potential();
    let (gv, s, n) = (g.values(), rho_s.values(), rho_n.values());
    base.with_potential((0..v.len()).map(|i| v[i] + gv[i] * (s[i] + 2.0 * n[i])).collect())
}

/// One outer iteration of the self-consistent loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub density_change: f64,
    pub condensate_residual: f64,
    pub excited_residual: f64,
    pub coupling_residual: f64,
}

#[derive(Debug, Clone)]
pub struct ScfSolution {
    /// Trap potential on the grid.
    pub potential: RealField,
    pub coupling: RealField,
    /// Kinetic part and trap, `-Delta_h + V`.
    pub base: LinearOperator,
    pub phi: RealField,
    pub excited: Vec<RealField>,
    pub mu: f64,
    pub mu_excited: Vec<f64>,
    pub b: Vec<f64>,
    pub rho_s: RealField,
    pub rho_n: RealField,
    pub xi: f64,
    pub occupations: Vec<f64>,
    /// Closure state; absent for frozen occupations.
    pub thermo: Option<ThermoState>,
    pub energy: f64,
    pub zeta: f64,
    pub delta_max: f64,
    pub history: Vec<IterationRecord>,
    pub tol_eigen: f64,
}

impl ScfSolution {
    pub fn grid(&self) -> &Grid {
        self.phi.grid()
    }

    pub fn particles(&self) -> f64 {
        self.phi.norm_sq()
    }
}

/// Residual invariants of a stationary state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvariantReport {
    /// `| ||Phi||^2 / N - 1 |`.
    pub norm_error: f64,
    /// Largest deviation of `<phi_i, phi_j>` from `delta_ij` and of `<Phi, phi_j> / sqrt(N)` from 0.
    pub orthonormality_error: f64,
    pub condensate_residual: f64,
    pub excited_residual: f64,
    /// `max_j |N b_j - <Phi, H_phi phi_j>|`.
    pub coupling_residual: f64,
    /// Largest pointwise mismatch of the stored densities.
    pub density_mismatch: f64,
    pub number_residual: f64,
    pub occupation_residual: f64,
}

impl InvariantReport {
    pub fn passes(&self, tol_eigen: f64, particles: f64, floor: f64) -> bool {
        let t = tol_eigen.max(floor);
        self.norm_error <= 1e-10
            && self.orthonormality_error <= 1e-10
            && self.condensate_residual <= t * particles.sqrt()
            && self.excited_residual <= t
            && self.coupling_residual <= 10.0 * t
            && self.density_mismatch <= 1e-12 * (1.0 + particles)
            && self.number_residual <= 1e-10
            && self.occupation_residual <= 1e-13
    }
}

/// Evaluates every residual invariant from the stored fields.
pub fn invariants(sol: &ScfSolution) -> Result<InvariantReport> {
    let grid = *sol.grid();
    let n = sol.particles();
    let target = sol.thermo.as_ref().map_or(n, |t| t.particles);
    let w = grid.cell_volume();
    let norm_error = (n / target - 1.0).abs();
    let mut ortho: f64 = 0.0;
    for (i, a) in sol.excited.iter().enumerate() {
        ortho = ortho.max((sol.phi.inner(a)? / target.sqrt()).abs());
        for (j, b) in sol.excited.iter().enumerate().skip(i) {
            let d = if i == j { 1.0 } else { 0.0 };
            ortho = ortho.max((a.inner(b)? - d).abs());
        }
    }
    let h_phi = condensate_operator(&sol.base, &sol.coupling, &sol.rho_s, &sol.rho_n)?;
    let mut r = h_phi.apply(sol.phi.values());
    axpy(-sol.mu, sol.phi.values(), &mut r);
    let condensate_residual = (dot(&r, &r) * w).sqrt();
    let h_exc = excited_operator(&sol.base, &sol.coupling, &sol.rho_s, &sol.rho_n)?;
    let mut excited_residual: f64 = 0.0;
    let mut coupling_residual: f64 = 0.0;
    for ((v, &mu), &b) in sol.excited.iter().zip(&sol.mu_excited).zip(&sol.b) {
        let hv = h_exc.apply(v.values());
        coupling_residual = coupling_residual.max((target * b - dot(sol.phi.values(), &hv) * w).abs());
        let mut r = hv;
        axpy(-mu, v.values(), &mut r);
        axpy(-b, sol.phi.values(), &mut r);
        excited_residual = excited_residual.max((dot(&r, &r) * w).sqrt());
    }
    let rho_s = sol.phi.map(|p| sol.xi * p * p);
    let rho_n = normal_density(&grid, &sol.excited, &sol.occupations);
    let mismatch = |a: &RealField, b: &RealField| a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let density_mismatch = mismatch(&rho_s, &sol.rho_s).max(mismatch(&rho_n, &sol.rho_n));
    let (number_residual, occupation_residual) = match &sol.thermo {
        Some(t) => (t.number_residual().abs(), t.occupation_residual()),
        None => (0.0, 0.0),
    };
    Ok(InvariantReport {
        norm_error,
        orthonormality_error: ortho,
        condensate_residual,
        excited_residual,
        coupling_residual,
        density_mismatch,
        number_residual,
        occupation_residual,
    })
}

/// `sum_j n_j phi_j^2`, skipping occupations below the cutoff.
pub fn normal_density(grid: &Grid, excited: &[RealField], occupations: &[f64]) -> RealField {
    let mut rho = vec![0.0; grid.len()];
    for (v, &n) in excited.iter().zip(occupations) {
        if n < OCCUPATION_CUTOFF {
            continue;
        }
        for (r, x) in rho.iter_mut().zip(v.values()) {
            *r += n * x * x;
        }
    }
    RealField::from_values(*grid, rho).expect("grid-sized buffer")
}

/// `zeta = N^-1 int g Phi^4`.
pub fn zeta(phi: &RealField, g: &RealField) -> f64 {
    let w = phi.grid().cell_volume();
    let n = phi.norm_sq();
    phi.values().iter().zip(g.values()).map(|(p, gv)| gv * p.powi(4)).sum::<f64>() * w / n
}

/// `N xi E + sum_j n_j E_j - 2 xi int g Phi^2 rho_n - int g rho_n^2`,
/// with `E = mu - xi^2 zeta / 2` and `E_j = mu_j - xi^2 zeta / 2`.
pub fn total_energy(sol: &ScfSolution) -> f64 {
    let w = sol.grid().cell_volume();
    let n = sol.particles();
    let z = zeta(&sol.phi, &sol.coupling);
    let shift = 0.5 * sol.xi * sol.xi * z;
    let mut e = n * sol.xi * (sol.mu - shift);
    e += sol.occupations.iter().zip(&sol.mu_excited).map(|(nj, mj)| nj * (mj - shift)).sum::<f64>();
    let (g, p, rn) = (sol.coupling.values(), sol.phi.values(), sol.rho_n.values());
    let cross: f64 = (0..g.len()).map(|i| g[i] * p[i] * p[i] * rn[i]).sum::<f64>() * w;
    let normal: f64 = (0..g.len()).map(|i| g[i] * rn[i] * rn[i]).sum::<f64>() * w;
    e - 2.0 * sol.xi * cross - normal
}

/// `max_x sqrt(rho a^3)` with `a = g / (8 pi)` and `rho = rho_s + rho_n`.
pub fn diluteness(rho_s: &RealField, rho_n: &RealField, g: &RealField) -> f64 {
    let a = |gv: f64| gv / (8.0 * std::f64::consts::PI);
    (0..g.values().len())
        .map(|i| ((rho_s.values()[i] + rho_n.values()[i]).max(0.0) * a(g.values()[i]).abs().powi(3)).sqrt())
        .fold(0.0, f64::max)
}

/// Grid, trap and coupling described by a configuration.
pub fn setup(cfg: &ScfConfig) -> Result<(LinearOperator, RealField, RealField)> {
    cfg.validate().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let grid = cfg.grid.build()?;
    let v = cfg.trap.sample(&grid);
    let base = LinearOperator::new(&grid, &v, cfg.grid.stencil)?;
    if let Some(eps) = cfg.epsilon {
        let limit = eps / 16.0;
        if grid.spacing() > limit * (1.0 + 1e-12) {
            return Err(Error::UnderResolved { spacing: grid.spacing(), limit });
        }
    }
    let g = cfg.microstructure.sample_coupling(&grid, cfg.epsilon, true)?;
    Ok((base, v, g))
}

/// Solves the configured stationary problem; an `epsilon` entry selects the oscillatory coupling.
pub fn scf_solve(cfg: &ScfConfig) -> Result<ScfSolution> {
    let (base, v, g) = setup(cfg)?;
    scf_solve_with(cfg, base, v, g)
}

/// Stationary state with `g = g0 [1 + A(x / eps)]`; requires `h <= eps / 16`.
pub fn full_epsilon_solve(cfg: &ScfConfig) -> Result<ScfSolution> {
    if cfg.epsilon.is_none() {
        return Err(Error::InvalidArgument("full epsilon solve needs an epsilon".into()));
    }
    scf_solve(cfg)
}

/// Outer loop on an explicit operator, potential and coupling.
pub fn scf_solve_with(cfg: &ScfConfig, base: LinearOperator, v: RealField, g: RealField) -> Result<ScfSolution> {
    let grid = *base.grid();
    let particles = cfg.thermo.particles;
    let count = cfg.thermo.excited_states;
    let alpha = cfg.mixing;
    let tol = cfg.tol_eigen;
    let frozen = match &cfg.mode {
        ModeSpec::Frozen { xi, occupations } => Some((*xi, occupations.clone())),
        ModeSpec::SelfConsistent => None,
    };
    let mut xi = frozen.as_ref().map_or(1.0, |f| f.0);
    let mut rho_n = RealField::zeros(grid);
    let mut phi_guess: Option<RealField> = None;
    let mut exc_guess: Option<Vec<RealField>> = None;
    let mut history: Vec<IterationRecord> = Vec::new();
    let flow = FlowOptions::with_tol(0.1 * tol * particles.sqrt());

    for it in 1..=cfg.max_outer {
        let (phi, mu) = solve_condensate(&base, &g, &rho_n, xi, particles, &flow, phi_guess.as_ref())?;
        let rho_s_in = phi.map(|p| xi * p * p);
        let exc = solve_excited(&base, &phi, &g, &rho_s_in, &rho_n, count, 0.1 * tol, exc_guess.as_deref())?;
        let (xi_new, occupations, thermo) = match &frozen {
            Some((x, occ)) => (*x, occ.clone(), None),
            None => {
                let t = solve_xi_z_order0(&cfg.thermo, mu, &exc.values)?;
                (t.xi, t.occupations.clone(), Some(t))
            }
        };
        let rho_n_new = normal_density(&grid, &exc.vectors, &occupations);
        let rho_s_new = phi.map(|p| xi_new * p * p);
        let sup_diff = |a: &RealField, b: &RealField| a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let change = sup_diff(&rho_s_new, &rho_s_in).max(sup_diff(&rho_n_new, &rho_n));

        let b: Vec<f64> = {
            let w = grid.cell_volume();
            let cubic: Vec<f64> = (0..grid.len()).map(|i| g.values()[i] * rho_s_new.values()[i] * phi.values()[i]).collect();
            exc.vectors.iter().map(|v| dot(&cubic, v.values()) * w / particles).collect()
        };
        let mut sol = ScfSolution {
            potential: v.clone(),
            coupling: g.clone(),
            base: base.clone(),
            phi: phi.clone(),
            excited: exc.vectors.clone(),
            mu,
            mu_excited: exc.values.clone(),
            b,
            rho_s: rho_s_new,
            rho_n: rho_n_new.clone(),
            xi: xi_new,
            occupations,
            thermo,
            energy: 0.0,
            zeta: 0.0,
            delta_max: 0.0,
            history: vec![],
            tol_eigen: tol,
        };
        let report = invariants(&sol)?;
        history.push(IterationRecord {
            iteration: it,
            density_change: change,
            condensate_residual: report.condensate_residual,
            excited_residual: report.excited_residual,
            coupling_residual: report.coupling_residual,
        });
        log::debug!("scf iteration {it}: change {change:.3e}, residual {:.3e}", report.condensate_residual);
        let floor = residual_floor(&condensate_operator(&base, &g, &sol.rho_s, &sol.rho_n)?);
        if change < cfg.tol_density && report.passes(tol, particles, floor) {
            sol.zeta = zeta(&sol.phi, &sol.coupling);
            sol.energy = total_energy(&sol);
            sol.delta_max = diluteness(&sol.rho_s, &sol.rho_n, &sol.coupling);
            if sol.delta_max > DILUTENESS_WARNING {
                log::warn!("diluteness sqrt(rho a^3) reaches {:.3e}", sol.delta_max);
            }
            let dropped: Vec<usize> =
                sol.occupations.iter().enumerate().filter(|(_, n)| **n < OCCUPATION_CUTOFF).map(|(j, _)| j).collect();
            if !dropped.is_empty() {
                log::warn!("occupations below {OCCUPATION_CUTOFF:e} left out of rho_n for levels {dropped:?}");
            }
            sol.history = history;
            return Ok(sol);
        }
        if stagnated(&history) {
            return Err(divergence("SCF stagnated", history));
        }
        xi = alpha * xi_new + (1.0 - alpha) * xi;
        rho_n = rho_n_new.zip_map(&rho_n, |a, b| alpha * a + (1.0 - alpha) * b)?;
        phi_guess = Some(phi);
        exc_guess = Some(exc.vectors);
    }
    Err(divergence("SCF", history))
}

/// No progress in the last 50 iterations relative to everything before.
fn stagnated(h: &[IterationRecord]) -> bool {
    if h.len() <= 100 {
        return false;
    }
    let split = h.len() - 50;
    let best_before = h[..split].iter().map(|r| r.density_change).fold(f64::INFINITY, f64::min);
    let best_recent = h[split..].iter().map(|r| r.density_change).fold(f64::INFINITY, f64::min);
    best_recent >= best_before
}

fn divergence(what: &str, history: Vec<IterationRecord>) -> Error {
    Error::Divergence {
        what: what.into(),
        iterations: history.len(),
        last_change: history.last().map_or(f64::NAN, |r| r.density_change),
        history: history.iter().map(|r| r.density_change).collect(),
    }
}
