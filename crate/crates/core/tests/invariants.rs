//! Cross-module invariants exercised through the public API.

use geoint_core::dct::{energy_invariance_experiment, RotationMap};
use geoint_core::diagnostics::{energy_error_series, max_abs_series, max_defect, symplectic_defect};
use geoint_core::genfun::{slopes_from_stm, StateTransitionMatrix};
use geoint_core::integrators::{newmark_stormer_residual, SchemeMap};
use geoint_core::linalg::{canonical_j, symmetrize};
use geoint_core::optctrl::{verify_commutative_diagram, Geometry, IntegratorPlant, ShootingOptions};
use geoint_core::systems::{make_double_well, make_harmonic_oscillator};
use geoint_core::{integrate, Matrix, PhaseState, Scheme, StepperConfig, Vector};
use proptest::prelude::*;

fn state(q: f64, p: f64) -> PhaseState {
    PhaseState::from_slices(&[q], &[p]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn midpoint_conserves_quadratic_energy(mass in 0.2..5.0f64, k in 0.2..5.0f64, q in -2.0..2.0f64, p in -2.0..2.0f64, tau in 0.001..0.5f64) {
        let ho = make_harmonic_oscillator(mass, k).unwrap();
        let traj = integrate(Scheme::Midpoint, &ho, &state(q, p), 200, &StepperConfig::new(tau)).unwrap();
        let scale = 1.0 + q * q + p * p;
        prop_assert!(max_abs_series(&energy_error_series(&traj, &ho).unwrap()) <= 1e-12 * scale * (mass + k + 1.0));
    }

    #[test]
    fn symplectic_schemes_on_double_well(q in 0.5..1.5f64, p in -0.5..0.5f64, tau in 0.01..0.2f64) {
        let dw = make_double_well();
        let probes = vec![state(q, p).to_vector()];
        for scheme in [Scheme::Verlet, Scheme::StormerHamiltonian, Scheme::Midpoint] {
            let d = max_defect(&symplectic_defect(&SchemeMap::new(scheme, &dw, StepperConfig::new(tau)), &probes).unwrap());
            prop_assert!(d <= 1e-9, "{scheme}: {d:e}");
        }
    }

    #[test]
    fn newmark_recurrence_any_beta(beta in 0.0..=0.5f64, q in 0.6..1.4f64, p in -0.3..0.3f64) {
        let dw = make_double_well();
        let cfg = StepperConfig::new(0.05);
        let traj = integrate(Scheme::Newmark { beta }, &dw, &state(q, p), 300, &cfg).unwrap();
        prop_assert!(newmark_stormer_residual(&dw, &traj, beta, cfg.tau).unwrap() <= 1e-12);
    }

    #[test]
    fn energy_error_invariant_under_rotation(theta in -3.0..3.0f64, q in 0.6..1.4f64, p in -0.3..0.3f64) {
        let dw = make_double_well();
        let report = energy_invariance_experiment(&RotationMap::new(theta).unwrap(), &dw, &state(q, p), 300, &StepperConfig::new(0.02)).unwrap();
        prop_assert!(report.max_difference() <= 1e-12);
    }

    #[test]
    fn exact_symplectic_matrices_have_exact_slopes(entries in proptest::collection::vec(-0.8..0.8f64, 16)) {
        let s = symmetrize(&Matrix::from_column_slice(4, 4, &entries));
        let phi = canonical_j(2) * s;
        let stm = StateTransitionMatrix { phi: phi.exp(), t: 1.0 };
        if let Ok(slopes) = slopes_from_stm(&stm, 1e4) {
            prop_assert!(slopes.defect <= 1e-12 * slopes.conditioning.max(1.0));
        }
    }
}

#[test]
fn control_routes_agree_for_several_plant_targets() {
    let opts = ShootingOptions::default();
    for (i, target) in [[1.0, -1.0], [0.3, 2.0], [-1.5, 0.2]].into_iter().enumerate() {
        for geometry in [Geometry::Stormer, Geometry::Midpoint] {
            let report = verify_commutative_diagram(
                &IntegratorPlant { dim: 2 },
                geometry,
                &Vector::from_vec(vec![0.0, 0.1 * i as f64]),
                &Vector::from_vec(target.to_vec()),
                1.0,
                40,
                &Vector::zeros(2),
                &opts,
            )
            .unwrap();
            assert!(report.max_discrepancy() <= 1e-10, "{geometry}: {:e}", report.max_discrepancy());
        }
    }
}
