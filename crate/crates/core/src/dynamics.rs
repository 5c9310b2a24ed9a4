//! Time evolution of the condensate and the thermal states at frozen occupations.
//!
//! One step of size `dt` is the composition `B(dt/2) K(dt) P(dt/2) B(dt/2)`.
//! `K` is a Crank-Nicolson step of `-Delta_h + U_n`, with the local mean-field
//! potential `U_n` frozen at the start of the step; `P` multiplies by the phase
//! of `U(t + dt) - U_n`, which makes the potential quadrature trapezoidal; `B`
//! is the explicit-midpoint update of the rank-one term `b_j Phi`.
//! A stationary state is an eigenvector of every `K`, so its densities do not move.
//! `P` and `K` preserve every norm exactly; `B` moves only the thermal norms.

use crate::banded::{BandedLdl, SymmetricBand};
use crate::error::{Error, Result};
use crate::grid::{cdot, Complex64, ComplexField, Grid, RealField};
use crate::operator::{LinearOperator, StencilOrder};
use crate::scf::ScfSolution;

/// Largest one-step change of `||Phi||^2 / N` or `||phi_j||^2` tolerated.
pub const STEP_DRIFT_LIMIT: f64 = 1e-6;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone)]
pub struct DynState {
    pub t: f64,
    pub phi: ComplexField,
    pub excited: Vec<ComplexField>,
    pub theta: f64,
    pub xi: f64,
    pub occupations: Vec<f64>,
    pub particles: f64,
    pub coupling: RealField,
    pub potential: RealField,
    pub stencil: StencilOrder,
}

impl DynState {
    pub fn new(
        phi: ComplexField,
        excited: Vec<ComplexField>,
        xi: f64,
        occupations: Vec<f64>,
        coupling: RealField,
        potential: RealField,
        stencil: StencilOrder,
    ) -> Result<Self> {
        let grid = *phi.grid();
        for f in &excited {
            grid.check_same(f.grid())?;
        }
        grid.check_same(coupling.grid())?;
        grid.check_same(potential.grid())?;
        if occupations.len() != excited.len() {
            return Err(Error::InvalidArgument(format!(
                "{} occupations for {} thermal states",
                occupations.len(),
                excited.len()
            )));
        }
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(Error::InvalidArgument(format!("condensate fraction {xi} outside (0, 1]")));
        }
        let particles = phi.norm_sq();
        if !(particles > 0.0) {
            return Err(Error::InvalidArgument("condensate has zero norm".into()));
        }
        Ok(Self { t: 0.0, phi, excited, theta: 0.0, xi, occupations, particles, coupling, potential, stencil })
    }

    /// Stationary state at `t = 0`, with the coupling multiplied by `coupling_scale`.
    pub fn from_scf(sol: &ScfSolution, coupling_scale: f64) -> Result<Self> {
        Self::new(
            sol.phi.to_complex(),
            sol.excited.iter().map(RealField::to_complex).collect(),
            sol.xi,
            sol.occupations.clone(),
            sol.coupling.map(|g| coupling_scale * g),
            sol.potential.clone(),
            sol.base.order(),
        )
    }

    pub fn grid(&self) -> &Grid {
        self.phi.grid()
    }

    /// `rho_s = xi |Phi|^2`.
    pub fn rho_s(&self) -> RealField {
        self.phi.modulus_sq().map(|v| self.xi * v)
    }

    /// `rho_n = sum_j n_j |phi_j|^2`.
    pub fn rho_n(&self) -> RealField {
        let mut out = vec![0.0; self.grid().len()];
        for (f, n) in self.excited.iter().zip(&self.occupations) {
            for (o, v) in out.iter_mut().zip(f.values()) {
                *o += n * v.norm_sqr();
            }
        }
        RealField::from_values(*self.grid(), out).expect("grid-sized buffer")
    }

    /// `zeta = N^-1 int g |Phi|^4`.
    pub fn zeta(&self) -> f64 {
        let w = self.grid().cell_volume();
        self.phi.values().iter().zip(self.coupling.values()).map(|(p, g)| g * p.norm_sqr().powi(2)).sum::<f64>() * w
            / self.particles
    }

    /// `b_j = N^-1 int conj(Phi) g xi |Phi|^2 phi_j`.
    pub fn couplings(&self) -> Vec<Complex64> {
        let w = self.weight_field();
        self.excited.iter().map(|f| cdot(&w, f.values())).collect()
    }

    /// `g xi |Phi|^2 Phi h^dim / N`, whose conjugate inner product gives `b_j`.
    fn weight_field(&self) -> Vec<Complex64> {
        let scale = self.xi * self.grid().cell_volume() / self.particles;
        self.phi.values().iter().zip(self.coupling.values()).map(|(p, g)| p * (scale * g * p.norm_sqr())).collect()
    }

    /// `d theta / dt = -2 xi int g |Phi|^2 rho_n - int g rho_n^2`.
    pub fn theta_rate(&self) -> f64 {
        let rn = self.rho_n();
        let w = self.grid().cell_volume();
        self.phi
            .values()
            .iter()
            .zip(self.coupling.values())
            .zip(rn.values())
            .map(|((p, g), n)| -2.0 * self.xi * g * p.norm_sqr() * n - g * n * n)
            .sum::<f64>()
            * w
    }

    pub fn observe(&self) -> Observables {
        let orth = self
            .excited
            .iter()
            .map(|f| self.phi.inner(f).expect("same grid").norm())
            .fold(0.0, f64::max);
        Observables {
            t: self.t,
            condensate_norm: self.phi.norm_sq(),
            max_overlap: orth,
            zeta: self.zeta(),
            theta: self.theta,
            excited_norms: self.excited.iter().map(ComplexField::norm_sq).collect(),
            density_change: 0.0,
        }
    }
}

/// One row of the observables series.
#[derive(Debug, Clone, PartialEq)]
pub struct Observables {
    pub t: f64,
    /// `||Phi||^2`.
    pub condensate_norm: f64,
    /// `max_j |<Phi, phi_j>|`.
    pub max_overlap: f64,
    pub zeta: f64,
    pub theta: f64,
    /// `||phi_j||^2`.
    pub excited_norms: Vec<f64>,
    /// `max(sup |rho_s(t) - rho_s(0)|, sup |rho_n(t) - rho_n(0)|)`.
    pub density_change: f64,
}

/// Crank-Nicolson propagator of `-Delta_h + U` for a frozen potential `U`.
#[derive(Debug, Clone)]
pub struct CrankNicolson {
    op: LinearOperator,
    half: f64,
    banded: Option<(SymmetricBand<Complex64>, BandedLdl<Complex64>)>,
}

impl CrankNicolson {
    pub fn new(grid: &Grid, order: StencilOrder, potential: Vec<f64>, dt: f64) -> Result<Self> {
        let op = LinearOperator::from_values(grid, potential, order)?;
        let half = 0.5 * dt;
        let banded = if grid.dim() == 1 {
            let h = op.bands(0.0)?;
            let lift = |sign: f64| {
                let bands = h
                    .bands
                    .iter()
                    .enumerate()
                    .map(|(b, band)| {
                        let id = if b == 0 { 1.0 } else { 0.0 };
                        band.iter().map(|&v| Complex64::new(id, sign * half * v)).collect()
                    })
                    .collect();
                SymmetricBand::new(bands)
            };
            Some((lift(-1.0)?, BandedLdl::factor(&lift(1.0)?)?))
        } else {
            None
        };
        Ok(Self { op, half, banded })
    }

    fn apply_h(&self, u: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); u.len()];
        self.op.kinetic_apply_complex(u, &mut out);
        for ((o, v), x) in out.iter_mut().zip(self.op.potential()).zip(u) {
            *o += v * x;
        }
        out
    }

    /// `u <- (1 + i dt H / 2)^-1 (1 - i dt H / 2) u`.
    pub fn apply(&self, u: &mut [Complex64]) -> Result<()> {
        if let Some((explicit, implicit)) = &self.banded {
            let mut out = explicit.mul_vec(u);
            implicit.solve_in_place(&mut out);
            u.copy_from_slice(&out);
            return Ok(());
        }
        let hu = self.apply_h(u);
        let rhs: Vec<Complex64> = u.iter().zip(&hu).map(|(x, y)| x - I * self.half * y).collect();
        let x = cocg(
            |v| {
                let hv = self.apply_h(v);
                v.iter().zip(&hv).map(|(x, y)| x + I * self.half * y).collect()
            },
            &rhs,
            u,
            1e-14,
            1000,
        )?;
        u.copy_from_slice(&x);
        Ok(())
    }
}

/// Conjugate orthogonal conjugate gradients for complex symmetric systems.
fn cocg(
    apply: impl Fn(&[Complex64]) -> Vec<Complex64>,
    b: &[Complex64],
    x0: &[Complex64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<Vec<Complex64>> {
    let bilinear = |a: &[Complex64], b: &[Complex64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<Complex64>();
    let norm = |a: &[Complex64]| a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let bnorm = norm(b);
    let mut x = x0.to_vec();
    if bnorm == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); b.len()]);
    }
    let ax = apply(&x);
    let mut r: Vec<Complex64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rho = bilinear(&r, &r);
    for _ in 0..max_iter {
        if norm(&r) <= rel_tol * bnorm {
            return Ok(x);
        }
        let ap = apply(&p);
        let alpha = rho / bilinear(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rho_new = bilinear(&r, &r);
        let beta = rho_new / rho;
        rho = rho_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    if norm(&r) <= 1e-10 * bnorm {
        return Ok(x);
    }
    Err(Error::LinearSolver(format!("Crank-Nicolson solve stalled at relative residual {:.3e}", norm(&r) / bnorm)))
}

/// Reusable stepping context for a fixed `dt`.
#[derive(Debug, Clone)]
pub struct Stepper {
    dt: f64,
}

impl Stepper {
    pub fn new(_state: &DynState, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
        }
        Ok(Self { dt })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `state` by one step and returns it.
    pub fn step(&self, mut state: DynState) -> Result<DynState> {
        let dt = self.dt;
        let grid = *state.grid();
        let before: Vec<f64> = std::iter::once(state.phi.norm_sq() / state.particles)
            .chain(state.excited.iter().map(ComplexField::norm_sq))
            .collect();
        let rate0 = state.theta_rate();
        rank_one(&mut state, 0.5 * dt);
        let (uc0, ue0) = mean_field(&state);
        CrankNicolson::new(&grid, state.stencil, uc0.clone(), dt)?.apply(state.phi.values_mut())?;
        let cn = CrankNicolson::new(&grid, state.stencil, ue0.clone(), dt)?;
        for f in &mut state.excited {
            cn.apply(f.values_mut())?;
        }
        let (uc1, ue1) = mean_field(&state);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
        phase(state.phi.values_mut(), &diff(&uc1, &uc0), 0.5 * dt);
        let de = diff(&ue1, &ue0);
        for f in &mut state.excited {
            phase(f.values_mut(), &de, 0.5 * dt);
        }
        rank_one(&mut state, 0.5 * dt);
        state.t += dt;
        state.theta += theta_evolve(rate0, state.theta_rate(), dt);
        let after = std::iter::once(state.phi.norm_sq() / state.particles).chain(state.excited.iter().map(ComplexField::norm_sq));
        let drift = before.iter().zip(after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !(drift <= STEP_DRIFT_LIMIT) {
            return Err(Error::Instability(format!(
                "norm drift {drift:.3e} in one step at t = {:.6}, dt = {dt:e}",
                state.t
            )));
        }
        Ok(state)
    }
}

/// Trapezoidal increment of the global phase.
pub fn theta_evolve(rate_start: f64, rate_end: f64, dt: f64) -> f64 {
    0.5 * dt * (rate_start + rate_end)
}

/// Local potentials `V + g (rho_s + 2 rho_n) - xi^2 zeta / 2` and
/// `V + 2 g (rho_s + rho_n) - xi^2 zeta / 2`.
pub fn mean_field(state: &DynState) -> (Vec<f64>, Vec<f64>) {
    let rs = state.rho_s();
    let rn = state.rho_n();
    let shift = 0.5 * state.xi * state.xi * state.zeta();
    let (v, g) = (state.potential.values(), state.coupling.values());
    let (rs, rn) = (rs.values(), rn.values());
    let n = v.len();
    let uc = (0..n).map(|i| v[i] + g[i] * (rs[i] + 2.0 * rn[i]) - shift).collect();
    let ue = (0..n).map(|i| v[i] + 2.0 * g[i] * (rs[i] + rn[i]) - shift).collect();
    (uc, ue)
}

fn phase(u: &mut [Complex64], potential: &[f64], tau: f64) {
    for (p, v) in u.iter_mut().zip(potential) {
        *p *= Complex64::from_polar(1.0, -tau * v);
    }
}

/// Explicit midpoint for `d phi_j / dt = i b_j Phi` with `Phi` held fixed.
fn rank_one(state: &mut DynState, tau: f64) {
    let w = state.weight_field();
    let phi = state.phi.values().to_vec();
    for j in 0..state.excited.len() {
        let b0 = cdot(&w, state.excited[j].values());
        let half: Vec<Complex64> =
            state.excited[j].values().iter().zip(&phi).map(|(f, p)| f + I * (0.5 * tau) * b0 * p).collect();
        let bh = cdot(&w, &half);
        for (f, p) in state.excited[j].values_mut().iter_mut().zip(&phi) {
            *f += I * tau * bh * p;
        }
    }
}

/// Single step with a fresh propagator.
pub fn step(state: DynState, dt: f64) -> Result<DynState> {
    Stepper::new(&state, dt)?.step(state)
}

/// Time series of observables and the final state.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub rows: Vec<Observables>,
    pub final_state: DynState,
}

impl Evolution {
    /// `max_t |  ||Phi(t)||^2 - ||Phi(0)||^2 | / N`.
    pub fn condensate_norm_drift(&self) -> f64 {
        let n0 = self.rows[0].condensate_norm;
        self.rows.iter().map(|r| (r.condensate_norm - n0).abs() / n0).fold(0.0, f64::max)
    }

    /// `max_{t,j} | ||phi_j(t)||^2 - ||phi_j(0)||^2 |`.
    pub fn excited_norm_drift(&self) -> f64 {
        let first = &self.rows[0].excited_norms;
        self.rows
            .iter()
            .flat_map(|r| r.excited_norms.iter().zip(first).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// `max_t max_j |<Phi, phi_j>| / sqrt(N)`, the overlap of the unit condensate direction.
    pub fn overlap_drift(&self) -> f64 {
        let n0 = self.rows[0].condensate_norm.sqrt();
        self.rows.iter().map(|r| r.max_overlap / n0).fold(0.0, f64::max)
    }

    pub fn max_density_change(&self) -> f64 {
        self.rows.iter().map(|r| r.density_change).fold(0.0, f64::max)
    }
}

/// Steps to `t_final`, recording every `observe_every`-th state and the last one.
pub fn evolve(state: DynState, t_final: f64, dt: f64, observe_every: usize) -> Result<Evolution> {
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidArgument(format!("final time {t_final} must be non-negative")));
    }
    if observe_every == 0 {
        return Err(Error::InvalidArgument("observe_every must be at least 1".into()));
    }
    let steps = (t_final / dt).round() as usize;
    if steps > 0 && ((steps as f64) * dt - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(Error::InvalidArgument(format!("t_final = {t_final} is not a multiple of dt = {dt}")));
    }
    let stepper = Stepper::new(&state, dt)?;
    let rs0 = state.rho_s();
    let rn0 = state.rho_n();
    let record = |s: &DynState| {
        let mut row = s.observe();
        let ds = s.rho_s().values().iter().zip(rs0.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dn = s.rho_n().values().iter().zip(rn0.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        row.density_change = ds.max(dn);
        row
    };
    let mut rows = vec![record(&state)];
    let mut state = state;
    for k in 1..=steps {
        state = stepper.step(state)?;
        // step count keeps t exact against accumulated rounding
        state.t = k as f64 * dt;
        if k % observe_every == 0 || k == steps {
            rows.push(record(&state));
        }
    }
    Ok(Evolution { rows, final_state: state })
}
