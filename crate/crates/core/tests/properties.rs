use proptest::prelude::*;

use bec_core::config::{GridSpec, ScfConfig};
use bec_core::dynamics::{evolve, DynState};
use bec_core::homogenization::{expand, reconstruct};
use bec_core::microstructure::Microstructure;
use bec_core::scf::{invariants, residual_floor, scf_solve};
use bec_core::StencilOrder;

fn small(beta: f64, particles: f64, g0: f64) -> ScfConfig {
    let mut c = ScfConfig::desk();
    c.grid = GridSpec { dim: 1, half_width: 6.0, points: 96, stencil: StencilOrder::Fourth };
    c.thermo.beta = beta;
    c.thermo.particles = particles;
    c.thermo.excited_states = 4;
    c.microstructure = Microstructure::uniform(g0).unwrap();
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn converged_states_satisfy_every_invariant(beta in 0.3f64..5.0, particles in 10.0f64..200.0, g0 in 0.01f64..0.3) {
        let cfg = small(beta, particles, g0);
        let sol = match scf_solve(&cfg) {
            Ok(s) => s,
            // hot, dilute corners may lie outside the condensed range for J = 4
            Err(bec_core::Error::ThermoRange { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let report = invariants(&sol).unwrap();
        prop_assert!(report.passes(cfg.tol_eigen, particles, residual_floor(&sol.base)), "{report:?}");
        prop_assert!(sol.xi > 0.0 && sol.xi <= 1.0);
        prop_assert!(sol.mu_excited.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sol.mu < sol.mu_excited[0]);
        prop_assert!(sol.rho_n.values().iter().all(|&r| r >= 0.0));
    }

    #[test]
    fn evolution_preserves_condensate_norm(scale in 0.8f64..1.5, steps in 1usize..40) {
        let sol = scf_solve(&small(1.0, 50.0, 0.1)).unwrap();
        let dt = 2e-3;
        let run = evolve(DynState::from_scf(&sol, scale).unwrap(), steps as f64 * dt, dt, 1).unwrap();
        prop_assert!(run.condensate_norm_drift() < 1e-12);
        prop_assert_eq!(run.rows.len(), steps + 1);
    }

    #[test]
    fn config_json_round_trip(beta in 0.1f64..10.0, particles in 1.0f64..1e4, amp in -0.9f64..0.9, eps in 0.01f64..1.0) {
        let mut cfg = small(beta, particles, 0.1);
        cfg.microstructure = Microstructure::cosine(0.2, amp).unwrap();
        cfg.epsilon = Some(eps);
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(ScfConfig::from_json(&text).unwrap(), cfg);
    }
}

#[test]
fn reconstruction_order_zero_is_slow_profile() {
    let mut cfg = small(1.0, 50.0, 0.1);
    cfg.microstructure = Microstructure::cosine(0.1, 0.5).unwrap();
    let exp = expand(&cfg).unwrap();
    for eps in [0.5, 0.25] {
        let (phi, excited) = reconstruct(&exp, eps, 0).unwrap();
        assert_eq!(phi.values(), exp.f[0].values());
        assert_eq!(excited.len(), exp.excited_count());
        let (phi2, _) = reconstruct(&exp, eps, 2).unwrap();
        let (phi3, _) = reconstruct(&exp, eps, 3).unwrap();
        let d2 = phi2.values().iter().zip(phi.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let d3 = phi3.values().iter().zip(phi2.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d2 > 0.0 && d3 > 0.0);
        // each added term carries its power of eps
        assert!(d3 < d2);
    }
}
