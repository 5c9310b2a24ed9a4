//! JSON run configuration shared by the stationary, sweep and evolution drivers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::grid::{Grid, RealField};
use crate::microstructure::Microstructure;
use crate::operator::StencilOrder;
use crate::thermo::ThermoParams;

/// Configuration problem tied to a dotted key path.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: &str, message: impl Into<String>) -> Self {
        Self { key: key.to_string(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub points: usize,
    #[serde(default)]
    pub stencil: StencilOrder,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        Grid::new(self.dim, self.half_width, self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrapSpec {
    /// `V(x) = sum_a c_a x_a^2`; a single coefficient applies to every axis.
    Harmonic { coefficients: Vec<f64> },
}

impl TrapSpec {
    pub fn sample(&self, grid: &Grid) -> RealField {
        match self {
            TrapSpec::Harmonic { coefficients } => RealField::from_fn(*grid, |x| {
                x.iter()
                    .enumerate()
                    .map(|(a, xa)| coefficients.get(a).or(coefficients.last()).copied().unwrap_or(0.0) * xa * xa)
                    .sum()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeSpec {
    /// Occupations follow the Bose-Einstein closure.
    #[default]
    SelfConsistent,
    /// Fixed condensate fraction and occupations.
    Frozen { xi: f64, occupations: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_points_per_period")]
    pub points_per_period: usize,
}

fn default_points_per_period() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    pub t_final: f64,
    pub dt: f64,
    #[serde(default = "one")]
    pub observe_every: usize,
    /// Multiplies the coupling at `t = 0`; values other than 1 quench the state.
    #[serde(default = "unit")]
    pub coupling_scale: f64,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn default_mixing() -> f64 {
    0.5
}

fn default_tol_density() -> f64 {
    1e-8
}

fn default_tol_eigen() -> f64 {
    1e-9
}

fn default_max_outer() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScfConfig {
    pub grid: GridSpec,
    pub trap: TrapSpec,
    pub microstructure: Microstructure,
    /// Fast-scale period; absent means constant coupling `g0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub thermo: ThermoParams,
    #[serde(default)]
    pub mode: ModeSpec,
    #[serde(default = "default_mixing")]
    pub mixing: f64,
    #[serde(default = "default_tol_density")]
    pub tol_density: f64,
    #[serde(default = "default_tol_eigen")]
    pub tol_eigen: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsSpec>,
}

impl ScfConfig {
    /// Parses and validates, reporting the offending key on failure.
    pub fn from_json(text: &str) -> std::result::Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let key = if path == "." || path.is_empty() { unknown_field(&inner.to_string()).unwrap_or(path) } else { path };
            ConfigError::new(&key, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let g = &self.grid;
        if !(1..=3).contains(&g.dim) {
            return Err(ConfigError::new("grid.dim", format!("{} is not 1, 2 or 3", g.dim)));
        }
        if !(g.half_width > 0.0) || !g.half_width.is_finite() {
            return Err(ConfigError::new("grid.half_width", "must be positive"));
        }
        if g.points < 8 || g.points % 2 != 0 {
            return Err(ConfigError::new("grid.points", "must be even and at least 8"));
        }
        let TrapSpec::Harmonic { coefficients } = &self.trap;
        if coefficients.is_empty() || coefficients.len() > g.dim || coefficients.iter().any(|c| !(*c >= 0.0)) {
            return Err(ConfigError::new("trap.coefficients", "need 1..=dim non-negative values"));
        }
        if self.microstructure.dim() > g.dim {
            return Err(ConfigError::new("microstructure.modes", "wave vectors exceed the grid dimension"));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) || !e.is_finite() {
                return Err(ConfigError::new("epsilon", "must be positive"));
            }
        }
        let t = &self.thermo;
        if !(t.beta > 0.0) || !t.beta.is_finite() {
            return Err(ConfigError::new("thermo.beta", "must be positive"));
        }
        if !(t.particles >= 1.0) || !t.particles.is_finite() {
            return Err(ConfigError::new("thermo.particles", "must be at least 1"));
        }
        if t.excited_states + 1 >= g.points.pow(g.dim as u32) {
            return Err(ConfigError::new("thermo.excited_states", "exceeds the grid dimension"));
        }
        if let ModeSpec::Frozen { xi, occupations } = &self.mode {
            if !(*xi > 0.0 && *xi <= 1.0) {
                return Err(ConfigError::new("mode.xi", "must lie in (0, 1]"));
            }
            if occupations.len() != t.excited_states {
                return Err(ConfigError::new(
                    "mode.occupations",
                    format!("{} values for {} excited states", occupations.len(), t.excited_states),
                ));
            }
            if occupations.iter().any(|n| !(*n >= 0.0) || !n.is_finite()) {
                return Err(ConfigError::new("mode.occupations", "must be non-negative"));
            }
        }
        if !(self.mixing > 0.0 && self.mixing <= 1.0) {
            return Err(ConfigError::new("mixing", "must lie in (0, 1]"));
        }
        if !(self.tol_density > 0.0) {
            return Err(ConfigError::new("tol_density", "must be positive"));
        }
        if !(self.tol_eigen > 0.0) {
            return Err(ConfigError::new("tol_eigen", "must be positive"));
        }
        if self.max_outer == 0 {
            return Err(ConfigError::new("max_outer", "must be positive"));
        }
        if let Some(s) = &self.sweep {
            if s.epsilons.is_empty() || s.epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
                return Err(ConfigError::new("sweep.epsilons", "need positive values"));
            }
            if s.points_per_period < 16 {
                return Err(ConfigError::new("sweep.points_per_period", "must be at least 16"));
            }
        }
        if let Some(d) = &self.dynamics {
            if !(d.t_final > 0.0) || !d.t_final.is_finite() {
                return Err(ConfigError::new("dynamics.t_final", "must be positive"));
            }
            if !(d.dt > 0.0) || d.dt > d.t_final {
                return Err(ConfigError::new("dynamics.dt", "must lie in (0, t_final]"));
            }
            if d.observe_every == 0 {
                return Err(ConfigError::new("dynamics.observe_every", "must be positive"));
            }
            if !(d.coupling_scale > 0.0) || !d.coupling_scale.is_finite() {
                return Err(ConfigError::new("dynamics.coupling_scale", "must be positive"));
            }
        }
        Ok(())
    }

    /// Desk-scale defaults: 1D, `L = 8`, 256 points, `N = 100`, `g0 = 0.1`, `beta = 1`, `J = 8`.
    pub fn desk() -> Self {
        Self {
            grid: GridSpec { dim: 1, half_width: 8.0, points: 256, stencil: StencilOrder::Fourth },
            trap: TrapSpec::Harmonic { coefficients: vec![1.0] },
            microstructure: Microstructure::uniform(0.1).expect("positive g0"),
            epsilon: None,
            thermo: ThermoParams { beta: 1.0, particles: 100.0, excited_states: 8 },
            mode: ModeSpec::SelfConsistent,
            mixing: default_mixing(),
            tol_density: default_tol_density(),
            tol_eigen: default_tol_eigen(),
            max_outer: default_max_outer(),
            sweep: None,
            dynamics: None,
        }
    }
}

/// Pulls the field name out of serde's "unknown field `x`" message.
fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.split("field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_roundtrip() {
        let c = ScfConfig::desk();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(ScfConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ScfConfig::from_json(
            r#"{"grid": {"dim": 1, "half_width": 8, "points": 64},
                "trap": {"kind": "harmonic", "coefficients": [1]},
                "microstructure": {"g0": 0.1},
                "thermo": {"beta": 1, "particles": 100, "excited_states": 2}}"#,
        )
        .unwrap();
        assert_eq!(c.mode, ModeSpec::SelfConsistent);
        assert_eq!((c.mixing, c.tol_density, c.tol_eigen, c.max_outer), (0.5, 1e-8, 1e-9, 500));
    }

    fn err_key(patch: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v = serde_json::to_value(ScfConfig::desk()).unwrap();
        patch(&mut v);
        ScfConfig::from_json(&v.to_string()).unwrap_err().key
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(err_key(|v| v["grid"]["points"] = 7.into()), "grid.points");
        assert_eq!(err_key(|v| v["grid"]["points"] = "many".into()), "grid.points");
        assert_eq!(err_key(|v| v["mixing"] = 1.5.into()), "mixing");
        assert_eq!(err_key(|v| v["thermo"]["beta"] = (-1.0).into()), "thermo.beta");
        assert!(err_key(|v| v["bogus"] = 1.into()).contains("bogus"));
        assert!(err_key(|v| v["thermo"]["temp"] = 1.into()).contains("temp"));
        assert_eq!(
            err_key(|v| v["mode"] = serde_json::json!({"kind": "frozen", "xi": 1.0, "occupations": [0.0]})),
            "mode.occupations"
        );
    }

    #[test]
    fn harmonic_trap_broadcasts() {
        let g = Grid::new(2, 4.0, 8).unwrap();
        let v = TrapSpec::Harmonic { coefficients: vec![2.0] }.sample(&g);
        let x = g.node(9);
        assert!((v.values()[9] - 2.0 * (x[0] * x[0] + x[1] * x[1])).abs() < 1e-14);
    }
}
