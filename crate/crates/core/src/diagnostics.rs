//! Symplectic-defect and energy-error diagnostics.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::integrators::{OneStepMap, Trajectory};
use crate::linalg::{fd_jacobian, symplectic_form_defect};
use crate::report::{fmt_f64, CsvTable};
use crate::systems::Hamiltonian;
use crate::{Matrix, Vector};

/// Relative central-difference step for step-map Jacobians.
pub const JACOBIAN_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMethod {
    Analytic,
    CentralFd,
}

impl fmt::Display for JacobianMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JacobianMethod::Analytic => "analytic",
            JacobianMethod::CentralFd => "central-fd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticDefectReport {
    pub defect: f64,
    pub jacobian_method: JacobianMethod,
    pub probe: Vector,
}

/// Jacobian of a one-step map by central differences with step
/// `1e-6 (1 + |z_i|)`.
pub fn step_jacobian(map: &dyn OneStepMap, z: &Vector) -> Result<Matrix> {
    fd_jacobian(|v| map.apply(v), z, |x| JACOBIAN_FD_STEP * (1.0 + x.abs()))
}

/// `‖DφᵀJDφ − J‖_∞` at every probe.
pub fn symplectic_defect(map: &dyn OneStepMap, probes: &[Vector]) -> Result<Vec<SymplecticDefectReport>> {
    probes
        .iter()
        .map(|z| {
            let jac = step_jacobian(map, z)?;
            Ok(SymplecticDefectReport {
                defect: symplectic_form_defect(&jac),
                jacobian_method: JacobianMethod::CentralFd,
                probe: z.clone(),
            })
        })
        .collect()
}

/// Defect report for a Jacobian that is already known exactly.
pub fn analytic_defect(jacobian: &Matrix, probe: Vector) -> SymplecticDefectReport {
    SymplecticDefectReport {
        defect: symplectic_form_defect(jacobian),
        jacobian_method: JacobianMethod::Analytic,
        probe,
    }
}

pub fn max_defect(reports: &[SymplecticDefectReport]) -> f64 {
    reports.iter().map(|r| r.defect).fold(0.0, f64::max)
}

/// `H(z_k) − H(z_0)` along a trajectory.
pub fn energy_error_series(traj: &Trajectory, sys: &dyn Hamiltonian) -> Result<Vec<f64>> {
    let h0 = sys.energy_at(&traj.states[0])?;
    traj.states.iter().map(|s| Ok(sys.energy_at(s)? - h0)).collect()
}

pub fn max_abs_series(series: &[f64]) -> f64 {
    series.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Uniform probes in the box `center ± half_width`, reproducible from `seed`.
pub fn sample_probes(center: &Vector, half_width: &Vector, count: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Vector::from_fn(center.len(), |i, _| center[i] + half_width[i] * rng.random_range(-1.0..=1.0)))
        .collect()
}

/// Columns `probe, z…, defect, method`.
pub fn defect_reports_csv(reports: &[SymplecticDefectReport]) -> CsvTable {
    let dim = reports.first().map_or(0, |r| r.probe.len());
    let mut header = vec!["probe".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    header.extend(["defect".to_string(), "method".to_string()]);
    let mut table = CsvTable::new(header);
    for (i, r) in reports.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(r.probe.iter().map(|x| fmt_f64(*x)));
        row.push(fmt_f64(r.defect));
        row.push(r.jacobian_method.to_string());
        table.push_row(row);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{integrate, FnMap, Scheme, SchemeMap, StepperConfig};
    use crate::linalg::inverse;
    use crate::systems::{make_double_well, make_harmonic_oscillator, PhaseState};
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    #[test]
    fn identity_jacobian() {
        let id = FnMap::new(4, |z: &Vector| Ok(z.clone()));
        let jac = step_jacobian(&id, &v(&[1.0, -2.0, 0.3, 4.0])).unwrap();
        assert_abs_diff_eq!(jac, Matrix::identity(4, 4), epsilon = 1e-9);
    }

    #[test]
    fn midpoint_jacobian_is_cayley() {
        let ho = make_harmonic_oscillator(1.0, 1.0).unwrap();
        let tau = 0.1;
        let map = SchemeMap::new(Scheme::Midpoint, &ho, StepperConfig::new(tau));
        let jac = step_jacobian(&map, &v(&[0.3, -0.8])).unwrap();
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]) * (0.5 * tau);
        let id = Matrix::identity(2, 2);
        let cayley = inverse(&(&id - &a), "test").unwrap() * (id + a);
        assert_abs_diff_eq!(jac, cayley, epsilon = 1e-9);
    }

    #[test]
    fn rk4_is_not_area_preserving() {
        let ho = make_harmonic_oscillator(1.0, 1.0).unwrap();
        let map = SchemeMap::new(Scheme::Rk4, &ho, StepperConfig::new(0.1));
        let jac = step_jacobian(&map, &v(&[1.0, 0.0])).unwrap();
        assert!((jac.determinant() - 1.0).abs() > 1e-12);
    }

    #[test]
    fn defect_examples() {
        let dw = make_double_well();
        let probe = [v(&[1.0, 0.05])];
        let mid = SchemeMap::new(Scheme::Midpoint, &dw, StepperConfig::new(0.1));
        assert!(max_defect(&symplectic_defect(&mid, &probe).unwrap()) <= 1e-9);
        let rk4 = SchemeMap::new(Scheme::Rk4, &dw, StepperConfig::new(0.1));
        assert!(max_defect(&symplectic_defect(&rk4, &probe).unwrap()) >= 1e-8);

        let ho = make_harmonic_oscillator(1.0, 1.0).unwrap();
        let verlet = SchemeMap::new(Scheme::Verlet, &ho, StepperConfig::new(0.1));
        let probes = sample_probes(&v(&[0.0, 0.0]), &v(&[3.0, 3.0]), 20, 7);
        let worst = max_defect(&symplectic_defect(&verlet, &probes).unwrap());
        assert!(worst <= 1e-10, "{worst}");
    }

    #[test]
    fn defect_invariant_under_symplectic_conjugation() {
        let dw = make_double_well();
        let cfg = StepperConfig::new(0.1);
        let shear = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.7, 1.0]);
        let rot = Matrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        let s = rot * shear;
        let s_inv = inverse(&s, "test").unwrap();
        let plain = SchemeMap::new(Scheme::Midpoint, &dw, cfg);
        let conj = FnMap::new(2, |z: &Vector| Ok(&s_inv * plain.apply(&(&s * z))?));
        for z in sample_probes(&v(&[0.0, 0.0]), &v(&[1.0, 1.0]), 10, 3) {
            let a = symplectic_defect(&plain, &[&s * &z]).unwrap()[0].defect;
            let b = symplectic_defect(&conj, &[z]).unwrap()[0].defect;
            assert!((a - b).abs() <= 2e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn energy_series() {
        let ho = make_harmonic_oscillator(1.0, 1.0).unwrap();
        let s0 = PhaseState::from_slices(&[0.0], &[0.0]).unwrap();
        let still = integrate(Scheme::Verlet, &ho, &s0, 10, &StepperConfig::new(0.1)).unwrap();
        assert!(energy_error_series(&still, &ho).unwrap().iter().all(|e| *e == 0.0));

        let dw = make_double_well();
        let s0 = PhaseState::from_slices(&[1.0], &[0.05]).unwrap();
        let traj = integrate(Scheme::Midpoint, &dw, &s0, 2000, &StepperConfig::new(0.01)).unwrap();
        let err = energy_error_series(&traj, &dw).unwrap();
        let peak = max_abs_series(&err);
        assert!(peak > 1e-8 && peak < 1e-3);
        assert!(err.iter().any(|e| *e > 0.0) && err.iter().any(|e| *e < 0.0));
    }

    #[test]
    fn probes_are_reproducible() {
        let a = sample_probes(&v(&[0.0, 1.0]), &v(&[1.0, 2.0]), 5, 42);
        let b = sample_probes(&v(&[0.0, 1.0]), &v(&[1.0, 2.0]), 5, 42);
        assert_eq!(a, b);
        assert!(a.iter().all(|z| z[0].abs() <= 1.0 && (z[1] - 1.0).abs() <= 2.0));
        let csv = defect_reports_csv(&[analytic_defect(&Matrix::identity(2, 2), v(&[1.0, 2.0]))]);
        assert_eq!(csv.header(), &["probe", "z0", "z1", "defect", "method"]);
        assert_eq!(csv.rows()[0][4], "analytic");
    }
}
