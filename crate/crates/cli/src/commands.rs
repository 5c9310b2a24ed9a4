use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;
use thiserror::Error;

use bec_core::config::{ConfigError, DynamicsSpec, ScfConfig, SweepSpec};
use bec_core::dynamics::{evolve as run_evolution, DynState};
use bec_core::homogenization::{
    corrector2, corrector3, energy_expansion, epsilon_sweep, order0_solve, order1_solve, order2_residuals, order2_solve,
    sweep_points, FixedPointOptions,
};
use bec_core::microstructure::{verify_oscillatory_decay, TestFunction};
use bec_core::scf::{full_epsilon_solve, invariants, scf_solve, ScfSolution};

use crate::output::{
    write_convergence, write_json, write_observables, write_sweep, AsymptoticsOut, DecayCase, ExpansionOut,
    InitialStateOut, Phases, SolutionOut,
};

const DEFAULT_POINTS_PER_PERIOD: usize = 16;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error at {}: {}", .0.key, .0.message)]
    Config(#[from] ConfigError),

    #[error("cannot read configuration {path}: {source}")]
    ConfigRead { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{context}: {source}")]
    Module { context: &'static str, source: bec_core::Error },

    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::ConfigRead { .. } => 2,
            Self::Io { .. } | Self::Module { .. } => 1,
            Self::Verification(_) => 3,
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> String {
        let body = match self {
            Self::Config(e) => json!({"kind": "config", "key": e.key, "message": e.message}),
            Self::ConfigRead { path, source } => {
                json!({"kind": "config", "key": "", "message": format!("{}: {source}", path.display())})
            }
            Self::Io { path, source } => json!({"kind": "io", "path": path.display().to_string(), "message": source.to_string()}),
            Self::Module { context, source } => {
                json!({"kind": "module", "code": source.code(), "context": context, "message": source.to_string()})
            }
            Self::Verification(m) => json!({"kind": "verification", "message": m}),
        };
        json!({ "error": body }).to_string()
    }
}

fn module(context: &'static str) -> impl FnOnce(bec_core::Error) -> CliError {
    move |source| CliError::Module { context, source }
}

fn load(path: &Path) -> Result<ScfConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::ConfigRead { path: path.to_path_buf(), source })?;
    Ok(ScfConfig::from_json(&text)?)
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|source| CliError::Io { path: out.to_path_buf(), source })
}

fn write_solution(cfg: &ScfConfig, sol: &ScfSolution, out: &Path) -> Result<(), CliError> {
    let report = invariants(sol).map_err(module("invariants"))?;
    write_json(&out.join("solution.json"), &SolutionOut::new(cfg, sol, report))?;
    write_convergence(&out.join("convergence.csv"), &sol.history)
}

pub fn stationary(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load(config)?;
    prepare_out(out)?;
    let sol = scf_solve(&cfg).map_err(module("stationary solve"))?;
    info!("converged after {} iterations, mu = {}", sol.history.len(), sol.mu);
    write_solution(&cfg, &sol, out)
}

/// Refines the grid to the sweep resolution when the configured spacing cannot resolve `eps`.
fn resolve_for(cfg: &mut ScfConfig, eps: f64) -> Result<(), CliError> {
    let h = 2.0 * cfg.grid.half_width / cfg.grid.points as f64;
    if h <= eps / 16.0 {
        return Ok(());
    }
    let m = cfg.sweep.as_ref().map_or(DEFAULT_POINTS_PER_PERIOD, |s| s.points_per_period);
    let points = sweep_points(cfg.grid.half_width, eps, m)
        .map_err(|e| ConfigError::new("epsilon", format!("grid cannot be refined: {e}")))?;
    info!("refining grid from {} to {} points per axis", cfg.grid.points, points);
    cfg.grid.points = points;
    Ok(())
}

pub fn full_eps(config: &Path, out: &Path, epsilon: Option<f64>) -> Result<(), CliError> {
    let mut cfg = load(config)?;
    if epsilon.is_some() {
        cfg.epsilon = epsilon;
    }
    let Some(eps) = cfg.epsilon else {
        return Err(ConfigError::new("epsilon", "required for full-eps (flag or config)").into());
    };
    cfg.validate()?;
    resolve_for(&mut cfg, eps)?;
    prepare_out(out)?;
    let sol = full_epsilon_solve(&cfg).map_err(module("full-epsilon solve"))?;
    write_solution(&cfg, &sol, out)
}

pub fn expand(config: &Path, out: &Path, order: usize) -> Result<(), CliError> {
    let cfg = load(config)?;
    if order > 3 {
        return Err(ConfigError::new("order", format!("{order} exceeds 3")).into());
    }
    prepare_out(out)?;
    let mut exp = order0_solve(&cfg).map_err(module("order-0 solve"))?;
    let first = if order >= 1 { Some(order1_solve(&mut exp).map_err(module("order-1 solve"))?) } else { None };
    let (second, c2, c3) = if order >= 2 {
        order2_solve(&mut exp, &FixedPointOptions::default()).map_err(module("order-2 solve"))?;
        energy_expansion(&mut exp);
        let residuals = order2_residuals(&exp).map_err(module("order-2 residuals"))?;
        let c2 = corrector2(&exp).map_err(module("order-2 corrector"))?;
        let c3 = if order >= 3 { Some(corrector3(&exp).map_err(module("order-3 corrector"))?) } else { None };
        (Some(residuals), Some(c2), c3)
    } else {
        (None, None, None)
    };
    let record = ExpansionOut::new(&cfg, &exp, order, first, second, c2.as_ref(), c3.as_ref());
    write_json(&out.join("expansion.json"), &record)
}

pub fn sweep(config: &Path, out: &Path, epsilons: Option<Vec<f64>>) -> Result<(), CliError> {
    let mut cfg = load(config)?;
    if let Some(list) = epsilons {
        let m = cfg.sweep.as_ref().map_or(DEFAULT_POINTS_PER_PERIOD, |s| s.points_per_period);
        cfg.sweep = Some(SweepSpec { epsilons: list, points_per_period: m });
    }
    let Some(spec) = cfg.sweep.clone() else {
        return Err(ConfigError::new("sweep.epsilons", "required for sweep (flag or config)").into());
    };
    cfg.validate()?;
    if spec.epsilons.len() < 2 {
        return Err(ConfigError::new("sweep.epsilons", "need at least two values").into());
    }
    for &e in &spec.epsilons {
        sweep_points(cfg.grid.half_width, e, spec.points_per_period)
            .map_err(|err| ConfigError::new("sweep.epsilons", err.to_string()))?;
    }
    prepare_out(out)?;
    let report = epsilon_sweep(&cfg, &spec.epsilons, spec.points_per_period).map_err(module("epsilon sweep"))?;
    write_sweep(&out.join("sweep.csv"), &report)?;
    write_json(&out.join("sweep.json"), &report)
}

pub fn evolve(config: &Path, out: &Path, tfinal: Option<f64>, dt: Option<f64>) -> Result<(), CliError> {
    let mut cfg = load(config)?;
    let mut spec = cfg.dynamics.clone().unwrap_or(DynamicsSpec { t_final: 0.0, dt: 0.0, observe_every: 1, coupling_scale: 1.0 });
    if let Some(t) = tfinal {
        spec.t_final = t;
    }
    if let Some(d) = dt {
        spec.dt = d;
    }
    cfg.dynamics = Some(spec.clone());
    cfg.validate()?;
    let steps = spec.t_final / spec.dt;
    if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
        return Err(ConfigError::new("dynamics.dt", "t_final must be a whole number of steps").into());
    }
    prepare_out(out)?;
    let sol = scf_solve(&cfg).map_err(module("stationary solve"))?;
    let report = invariants(&sol).map_err(module("invariants"))?;
    let state = DynState::from_scf(&sol, spec.coupling_scale).map_err(module("initial state"))?;
    let initial = InitialStateOut {
        solution: SolutionOut::new(&cfg, &sol, report),
        phases: Phases {
            theta: state.theta,
            condensate: 0.0,
            excited: vec![0.0; state.excited.len()],
            coupling_scale: spec.coupling_scale,
        },
    };
    write_json(&out.join("initial_state.json"), &initial)?;
    let run = run_evolution(state, spec.t_final, spec.dt, spec.observe_every).map_err(module("evolution"))?;
    write_observables(&out.join("observables.csv"), &run.rows)
}

pub fn verify_asymptotics(config: &Path, out: &Path, m: usize) -> Result<(), CliError> {
    let cfg = load(config)?;
    if m == 0 {
        return Err(ConfigError::new("m", "decay order must be positive").into());
    }
    prepare_out(out)?;
    let mut cases = Vec::new();
    for test in [TestFunction::Gaussian, TestFunction::Bump] {
        for mean in [0.0, 1.0] {
            let report = verify_oscillatory_decay(&cfg.microstructure, mean, test, &test.default_epsilons())
                .map_err(module("oscillatory decay"))?;
            let name = serde_json::to_value(test).expect("unit variant").as_str().unwrap_or_default().to_string();
            cases.push(DecayCase { test_function: name, mean, passes: report.passes(m as f64), report });
        }
    }
    let passed = cases.iter().all(|c| c.passes);
    write_json(&out.join("asymptotics.json"), &AsymptoticsOut { m, cases, passed })?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Verification(format!("remainder decays slower than eps^{m}")))
    }
}
