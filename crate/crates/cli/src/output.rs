//! Serializable artifacts and their writers.

use std::fs;
use std::path::Path;

use serde::Serialize;

use bec_core::config::{GridSpec, ScfConfig};
use bec_core::dynamics::Observables;
use bec_core::homogenization::{Corrector2, Corrector3, ExpansionSolution, FirstOrderCheck, SecondOrderResiduals, SweepReport};
use bec_core::microstructure::DecayReport;
use bec_core::scf::{InvariantReport, IterationRecord, ScfSolution};
use bec_core::thermo::ThermoState;
use bec_core::RealField;

use crate::commands::CliError;

fn flat(f: &RealField) -> Vec<f64> {
    f.values().to_vec()
}

fn flat_all(fs: &[RealField]) -> Vec<Vec<f64>> {
    fs.iter().map(flat).collect()
}

/// Stationary state: scalars plus fields as flat node arrays.
#[derive(Debug, Serialize)]
pub struct SolutionOut {
    pub grid: GridSpec,
    pub epsilon: Option<f64>,
    pub particles: f64,
    pub xi: f64,
    pub mu: f64,
    pub mu_excited: Vec<f64>,
    /// `E = mu - xi^2 zeta / 2`.
    pub energy_per_particle: f64,
    pub energy_excited: Vec<f64>,
    pub total_energy: f64,
    pub zeta: f64,
    pub diluteness: f64,
    pub occupations: Vec<f64>,
    pub couplings: Vec<f64>,
    pub thermo: Option<ThermoState>,
    pub iterations: usize,
    pub invariants: InvariantReport,
    pub axis: Vec<f64>,
    pub phi: Vec<f64>,
    pub excited: Vec<Vec<f64>>,
    pub rho_s: Vec<f64>,
    pub rho_n: Vec<f64>,
    pub potential: Vec<f64>,
    pub coupling: Vec<f64>,
}

impl SolutionOut {
    pub fn new(cfg: &ScfConfig, sol: &ScfSolution, invariants: InvariantReport) -> Self {
        let shift = 0.5 * sol.xi * sol.xi * sol.zeta;
        Self {
            grid: cfg.grid.clone(),
            epsilon: cfg.epsilon,
            particles: sol.particles(),
            xi: sol.xi,
            mu: sol.mu,
            mu_excited: sol.mu_excited.clone(),
            energy_per_particle: sol.mu - shift,
            energy_excited: sol.mu_excited.iter().map(|m| m - shift).collect(),
            total_energy: sol.energy,
            zeta: sol.zeta,
            diluteness: sol.delta_max,
            occupations: sol.occupations.clone(),
            couplings: sol.b.clone(),
            thermo: sol.thermo.clone(),
            iterations: sol.history.len(),
            invariants,
            axis: sol.grid().axis_coordinates(),
            phi: flat(&sol.phi),
            excited: flat_all(&sol.excited),
            rho_s: flat(&sol.rho_s),
            rho_n: flat(&sol.rho_n),
            potential: flat(&sol.potential),
            coupling: flat(&sol.coupling),
        }
    }
}

/// Phases at `t = 0` of the evolution started from a stationary state.
#[derive(Debug, Serialize)]
pub struct Phases {
    pub theta: f64,
    pub condensate: f64,
    pub excited: Vec<f64>,
    pub coupling_scale: f64,
}

#[derive(Debug, Serialize)]
pub struct InitialStateOut {
    #[serde(flatten)]
    pub solution: SolutionOut,
    pub phases: Phases,
}

#[derive(Debug, Serialize)]
pub struct SliceOut {
    pub order: usize,
    pub f: Vec<f64>,
    pub fj: Vec<Vec<f64>>,
    pub mu: f64,
    pub mu_excited: Vec<f64>,
    pub xi: f64,
    pub z_ratio: f64,
    pub occupations: Vec<f64>,
    pub couplings: Vec<f64>,
    pub rho_s: Vec<f64>,
    pub rho_n: Vec<f64>,
    pub zeta: f64,
    pub energy_per_particle: f64,
    pub energy_excited: Vec<f64>,
    pub total_energy: f64,
}

#[derive(Debug, Serialize)]
pub struct CorrectorOut {
    /// Slow factor of `(-Delta_y)^-1 A` in `Phi^(2)`.
    pub condensate_order2: Vec<f64>,
    pub excited_order2: Vec<Vec<f64>>,
    /// Slow factors of `grad_y (-Delta_y)^-2 A` in `Phi^(3)`, one array per axis.
    pub condensate_order3: Option<Vec<Vec<f64>>>,
    pub excited_order3: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Serialize)]
pub struct ExpansionOut {
    pub grid: GridSpec,
    pub order: usize,
    pub a_norm_sq: f64,
    pub particles: f64,
    pub axis: Vec<f64>,
    pub slices: Vec<SliceOut>,
    pub first_order_check: Option<FirstOrderCheck>,
    pub second_order_residuals: Option<SecondOrderResiduals>,
    pub coupling_integral: Option<Vec<f64>>,
    pub fixed_point_sweeps: usize,
    pub correctors: Option<CorrectorOut>,
}

impl ExpansionOut {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: &ScfConfig,
        exp: &ExpansionSolution,
        order: usize,
        first: Option<FirstOrderCheck>,
        second: Option<SecondOrderResiduals>,
        c2: Option<&Corrector2>,
        c3: Option<&Corrector3>,
    ) -> Self {
        let slices = (0..=order.min(2))
            .map(|k| SliceOut {
                order: k,
                f: flat(&exp.f[k]),
                fj: flat_all(&exp.fj[k]),
                mu: exp.mu[k],
                mu_excited: exp.mu_excited[k].clone(),
                xi: exp.xi[k],
                z_ratio: exp.z_ratio[k],
                occupations: exp.occupations[k].clone(),
                couplings: exp.b[k].clone(),
                rho_s: flat(&exp.rho_s[k]),
                rho_n: flat(&exp.rho_n[k]),
                zeta: exp.zeta[k],
                energy_per_particle: exp.energy[k],
                energy_excited: exp.energy_excited[k].clone(),
                total_energy: exp.total_energy[k],
            })
            .collect();
        let correctors = c2.map(|c2| CorrectorOut {
            condensate_order2: flat(&c2.condensate_coeff),
            excited_order2: flat_all(&c2.excited_coeff),
            condensate_order3: c3.map(|c| flat_all(&c.condensate_coeff)),
            excited_order3: c3.map(|c| c.excited_coeff.iter().map(|v| flat_all(v)).collect()),
        });
        Self {
            grid: cfg.grid.clone(),
            order,
            a_norm_sq: exp.a_norm_sq,
            particles: exp.particles,
            axis: exp.grid().axis_coordinates(),
            slices,
            first_order_check: first,
            coupling_integral: second.as_ref().map(|_| exp.b2_integral.clone()),
            second_order_residuals: second,
            fixed_point_sweeps: exp.sweeps,
            correctors,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct DecayCase {
    pub test_function: String,
    pub mean: f64,
    pub passes: bool,
    #[serde(flatten)]
    pub report: DecayReport,
}

#[derive(Debug, Serialize)]
pub struct AsymptoticsOut {
    pub m: usize,
    pub cases: Vec<DecayCase>,
    pub passed: bool,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_convergence(path: &Path, history: &[IterationRecord]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let io = |e| csv_error(path, e);
    w.write_record(["iteration", "density_change", "condensate_residual", "excited_residual", "coupling_residual"]).map_err(io)?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            num(r.density_change),
            num(r.condensate_residual),
            num(r.excited_residual),
            num(r.coupling_residual),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Rows sorted by decreasing epsilon, then one `# name,value` footer line per fitted slope.
pub fn write_sweep(path: &Path, report: &SweepReport) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let io = |e| csv_error(path, e);
    w.write_record(["epsilon", "points", "err_order0", "err_order2", "err_order3", "energy_eps", "energy_expansion", "energy_remainder"])
        .map_err(io)?;
    for r in &report.rows {
        w.write_record([
            num(r.epsilon),
            r.points.to_string(),
            num(r.err_order0),
            num(r.err_order2),
            num(r.err_order3),
            num(r.energy_eps),
            num(r.energy_expansion),
            num(r.energy_remainder()),
        ])
        .map_err(io)?;
    }
    let mut bytes = w.into_inner().map_err(|e| CliError::Io { path: path.to_path_buf(), source: e.into_error() })?;
    use std::io::Write;
    let footer = format!(
        "# slope,{}\n# slope_order2,{}\n# slope_order3,{}\n# slope_energy,{}\n",
        num(report.slope_order0),
        num(report.slope_order2),
        num(report.slope_order3),
        num(report.slope_energy)
    );
    bytes.write_all(footer.as_bytes()).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn write_observables(path: &Path, rows: &[Observables]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let io = |e| csv_error(path, e);
    let j = rows.first().map_or(0, |r| r.excited_norms.len());
    let mut header: Vec<String> =
        ["t", "condensate_norm", "max_overlap", "zeta", "theta", "density_change"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=j).map(|k| format!("norm_{k}")));
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![num(r.t), num(r.condensate_norm), num(r.max_overlap), num(r.zeta), num(r.theta), num(r.density_change)];
        rec.extend(r.excited_norms.iter().map(|v| num(*v)));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}
