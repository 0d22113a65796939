//! State-transition matrices and the generating-function exactness test.
//!
//! For a flow `z0 ↦ z(t)` with STM `Φ`, the type-1 generating function
//! `S(q, q0)` exists where `Φ_qp` is invertible, and its mixed second
//! derivatives read off the STM blocks:
//! `S1 = ∂p0/∂q = Φ_qp⁻¹` and `S2 = ∂p/∂q0 = Φ_pq − Φ_pp Φ_qp⁻¹ Φ_qq`.
//! A canonical flow has `S1 = −S2ᵀ`. The literature states the condition
//! as `∂S1/∂q = ∂S2/∂q0`; the sign and transpose used here are fixed by
//! requiring a zero defect on the exact harmonic flow (see
//! [`exactness_sign`]).

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::integrators::{jacobian_of_flow, midpoint_step, midpoint_tangent, StepperConfig};
use crate::linalg::{apply_j, inf_norm, inverse, symmetrize, symplectic_form_defect};
use crate::report::{fmt_f64, CsvTable};
use crate::systems::{Hamiltonian, PhaseState};
use crate::{Matrix, Vector};

/// Conditioning above which the `(q, q0)` chart is declared singular.
pub const DEFAULT_SINGULAR_THRESHOLD: f64 = 1e12;
/// Conditioning above which exactness samples are masked in experiments.
pub const DEFAULT_EXACTNESS_MASK: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct StateTransitionMatrix {
    pub phi: Matrix,
    pub t: f64,
}

impl StateTransitionMatrix {
    pub fn identity(dim: usize) -> Self {
        Self { phi: Matrix::identity(dim, dim), t: 0.0 }
    }

    pub fn dof(&self) -> usize {
        self.phi.nrows() / 2
    }

    fn block(&self, r: usize, c: usize) -> Matrix {
        let n = self.dof();
        self.phi.view((r * n, c * n), (n, n)).into_owned()
    }

    pub fn qq(&self) -> Matrix {
        self.block(0, 0)
    }
    pub fn qp(&self) -> Matrix {
        self.block(0, 1)
    }
    pub fn pq(&self) -> Matrix {
        self.block(1, 0)
    }
    pub fn pp(&self) -> Matrix {
        self.block(1, 1)
    }

    /// `‖ΦᵀJΦ − J‖_∞`.
    pub fn symplectic_defect(&self) -> f64 {
        symplectic_form_defect(&self.phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StmMethod {
    Midpoint,
    Rk4,
}

impl StmMethod {
    pub const KEYS: [&'static str; 2] = ["midpoint", "rk4"];

    pub fn key(self) -> &'static str {
        match self {
            StmMethod::Midpoint => "midpoint",
            StmMethod::Rk4 => "rk4",
        }
    }
}

impl FromStr for StmMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "midpoint" => Ok(StmMethod::Midpoint),
            "rk4" => Ok(StmMethod::Rk4),
            other => Err(Error::UnknownKey { key: other.into(), valid: Self::KEYS.join(", ") }),
        }
    }
}

impl fmt::Display for StmMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// One RK4 step of the reference state together with its variational
/// equation `Φ̇ = J∇²H(z)Φ`.
fn rk4_variational_step(sys: &dyn Hamiltonian, z: &Vector, phi: &Matrix, tau: f64) -> Result<(Vector, Matrix)> {
    let eval = |z: &Vector, phi: &Matrix| -> Result<(Vector, Matrix)> {
        let field = apply_j(&sys.gradient(z)?);
        let a = jacobian_of_flow(&symmetrize(&sys.hessian(z)?));
        Ok((field, a * phi))
    };
    let (k1, l1) = eval(z, phi)?;
    let (k2, l2) = eval(&(z + &k1 * (0.5 * tau)), &(phi + &l1 * (0.5 * tau)))?;
    let (k3, l3) = eval(&(z + &k2 * (0.5 * tau)), &(phi + &l2 * (0.5 * tau)))?;
    let (k4, l4) = eval(&(z + &k3 * tau), &(phi + &l3 * tau))?;
    let z_next = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (tau / 6.0);
    let phi_next = phi + (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (tau / 6.0);
    Ok((z_next, phi_next))
}

/// STMs `Φ(t_k)` for `k = 0..=n_steps` along the reference trajectory,
/// which is returned alongside.
///
/// With midpoint each factor is the exact derivative of the implicit
/// step, so `Φ` is the product of one-step Jacobians.
pub fn propagate_stm_with_trajectory(
    sys: &dyn Hamiltonian,
    z0: &PhaseState,
    method: StmMethod,
    tau: f64,
    n_steps: usize,
) -> Result<(Vec<StateTransitionMatrix>, Vec<PhaseState>)> {
    let cfg = StepperConfig::new(tau);
    cfg.validate()?;
    let dim = 2 * sys.dof();
    crate::linalg::ensure_len(&z0.q, sys.dof())?;
    let mut stms = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    stms.push(StateTransitionMatrix::identity(dim));
    states.push(z0.clone());
    let mut z = z0.to_vector();
    let mut phi = Matrix::identity(dim, dim);
    for k in 1..=n_steps {
        let (z_next, phi_next) = match method {
            StmMethod::Midpoint => {
                let next = midpoint_step(sys, &PhaseState::from_vector(&z)?, &cfg).map_err(|e| e.at_step(k))?;
                let z_next = next.to_vector();
                let tangent = midpoint_tangent(sys, &z, &z_next, tau).map_err(|e| e.at_step(k))?;
                (z_next, tangent * &phi)
            }
            StmMethod::Rk4 => rk4_variational_step(sys, &z, &phi, tau).map_err(|e| e.at_step(k))?,
        };
        z = z_next;
        phi = phi_next;
        stms.push(StateTransitionMatrix { phi: phi.clone(), t: k as f64 * tau });
        states.push(PhaseState::from_vector(&z)?);
    }
    Ok((stms, states))
}

pub fn propagate_stm(
    sys: &dyn Hamiltonian,
    z0: &PhaseState,
    method: StmMethod,
    tau: f64,
    n_steps: usize,
) -> Result<Vec<StateTransitionMatrix>> {
    propagate_stm_with_trajectory(sys, z0, method, tau, n_steps).map(|(stms, _)| stms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingSlopes {
    /// `∂p0/∂q` at fixed `q0`.
    pub s1_grad_q: Matrix,
    /// `∂p/∂q0` at fixed `q`.
    pub s2_grad_q0: Matrix,
    /// `‖S1 − σ S2ᵀ‖_∞` with the calibrated sign `σ`.
    pub defect: f64,
    /// `‖Φ‖_∞ ‖Φ_qp⁻¹‖_∞`.
    pub conditioning: f64,
}

fn raw_slopes(stm: &StateTransitionMatrix) -> Result<(Matrix, Matrix, f64)> {
    let qp_inv = inverse(&stm.qp(), "generating function chart")
        .map_err(|_| Error::SingularGeneratingFunction { conditioning: f64::INFINITY })?;
    let conditioning = inf_norm(&stm.phi) * inf_norm(&qp_inv);
    let s2 = stm.pq() - stm.pp() * &qp_inv * stm.qq();
    Ok((qp_inv, s2, conditioning))
}

/// Sign `σ` with `S1 = σ S2ᵀ` for canonical flows, obtained from the exact
/// rotation `Φ(1)` of the unit harmonic oscillator.
pub fn exactness_sign() -> f64 {
    static SIGN: OnceLock<f64> = OnceLock::new();
    *SIGN.get_or_init(|| {
        let (c, s) = (1f64.cos(), 1f64.sin());
        let exact = StateTransitionMatrix { phi: Matrix::from_row_slice(2, 2, &[c, s, -s, c]), t: 1.0 };
        let (s1, s2, _) = raw_slopes(&exact).expect("rotation by one radian has an invertible block");
        let defect = |sign: f64| inf_norm(&(&s1 - s2.transpose() * sign));
        if defect(1.0) <= defect(-1.0) { 1.0 } else { -1.0 }
    })
}

/// Generating-function slopes; errors when the conditioning exceeds
/// `singular_threshold`.
pub fn slopes_from_stm(stm: &StateTransitionMatrix, singular_threshold: f64) -> Result<GeneratingSlopes> {
    let (s1, s2, conditioning) = raw_slopes(stm)?;
    if !(conditioning <= singular_threshold) {
        return Err(Error::SingularGeneratingFunction { conditioning });
    }
    let defect = inf_norm(&(&s1 - s2.transpose() * exactness_sign()));
    Ok(GeneratingSlopes { s1_grad_q: s1, s2_grad_q0: s2, defect, conditioning })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactnessSample {
    pub t: f64,
    /// `NaN` where the chart is singular.
    pub defect: f64,
    pub conditioning: f64,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactnessSeries {
    pub samples: Vec<ExactnessSample>,
    pub mask_threshold: f64,
    /// `‖ΦᵀJΦ − J‖_∞` of the final STM.
    pub final_symplectic_defect: f64,
    pub max_symplectic_defect: f64,
}

impl ExactnessSeries {
    pub fn max_masked_defect(&self) -> f64 {
        self.samples.iter().filter(|s| !s.masked).map(|s| s.defect).fold(0.0, f64::max)
    }

    pub fn max_unmasked_defect(&self) -> f64 {
        self.samples.iter().map(|s| s.defect).filter(|d| d.is_finite()).fold(0.0, f64::max)
    }

    pub fn masked_count(&self) -> usize {
        self.samples.iter().filter(|s| s.masked).count()
    }

    pub fn final_defect(&self) -> Option<f64> {
        self.samples.last().filter(|s| !s.masked).map(|s| s.defect)
    }

    /// Columns `t, defect, cond, masked`.
    pub fn to_csv(&self, skip_initial: bool) -> CsvTable {
        let mut table = CsvTable::new(["t", "defect", "cond", "masked"]);
        for s in self.samples.iter().skip(usize::from(skip_initial)) {
            table.push_row(vec![fmt_f64(s.t), fmt_f64(s.defect), fmt_f64(s.conditioning), u8::from(s.masked).to_string()]);
        }
        table
    }
}

/// Exactness defect along `[0, t_final]`; samples whose conditioning
/// exceeds `mask_threshold` (including `t = 0`) are masked.
pub fn exactness_experiment(
    sys: &dyn Hamiltonian,
    z0: &PhaseState,
    method: StmMethod,
    tau: f64,
    t_final: f64,
    mask_threshold: f64,
) -> Result<ExactnessSeries> {
    if !(t_final >= 0.0) {
        return Err(Error::invalid("T", "must be non-negative"));
    }
    let n_steps = (t_final / tau).round() as usize;
    let stms = propagate_stm(sys, z0, method, tau, n_steps)?;
    let mut max_symplectic_defect: f64 = 0.0;
    let samples = stms
        .iter()
        .map(|stm| {
            max_symplectic_defect = max_symplectic_defect.max(stm.symplectic_defect());
            match raw_slopes(stm) {
                Ok((s1, s2, conditioning)) => {
                    let defect = inf_norm(&(&s1 - s2.transpose() * exactness_sign()));
                    ExactnessSample { t: stm.t, defect, conditioning, masked: !(conditioning <= mask_threshold) }
                }
                Err(_) => ExactnessSample { t: stm.t, defect: f64::NAN, conditioning: f64::INFINITY, masked: true },
            }
        })
        .collect();
    let final_symplectic_defect = stms.last().map_or(0.0, |s| s.symplectic_defect());
    Ok(ExactnessSeries { samples, mask_threshold, final_symplectic_defect, max_symplectic_defect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::canonical_j;
    use crate::systems::make_harmonic_oscillator;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotation(t: f64) -> StateTransitionMatrix {
        let (c, s) = (t.cos(), t.sin());
        StateTransitionMatrix { phi: Matrix::from_row_slice(2, 2, &[c, s, -s, c]), t }
    }

    #[test]
    fn calibrated_sign_is_minus_one() {
        assert_eq!(exactness_sign(), -1.0);
    }

    #[test]
    fn exact_rotation_slopes() {
        for t in [0.3, 1.0, 2.5, 4.0] {
            let slopes = slopes_from_stm(&rotation(t), DEFAULT_SINGULAR_THRESHOLD).unwrap();
            assert_abs_diff_eq!(slopes.s1_grad_q[(0, 0)], 1.0 / t.sin(), epsilon = 1e-12);
            assert_abs_diff_eq!(slopes.s2_grad_q0[(0, 0)], -1.0 / t.sin(), epsilon = 1e-12);
            assert!(slopes.defect <= 1e-14);
        }
    }

    #[test]
    fn identity_flow_is_singular() {
        for t in [0.0, 1e-13] {
            let err = slopes_from_stm(&rotation(t), DEFAULT_SINGULAR_THRESHOLD).unwrap_err();
            assert!(matches!(err, Error::SingularGeneratingFunction { .. }));
        }
    }

    #[test]
    fn harmonic_midpoint_stm() {
        let ho = make_harmonic_oscillator(1.0, 1.0).unwrap();
        let z0 = PhaseState::from_slices(&[1.0], &[0.0]).unwrap();
        let n = (std::f64::consts::FRAC_PI_2 / 0.01).round() as usize;
        let stms = propagate_stm(&ho, &z0, StmMethod::Midpoint, 0.01, n).unwrap();
        assert_eq!(stms[0].phi, Matrix::identity(2, 2));
        let last = stms.last().unwrap();
        assert_abs_diff_eq!(last.phi, rotation(last.t).phi, epsilon = 1e-4);
        assert!(last.symplectic_defect() <= 1e-10);

        let at_one = &stms[100];
        assert!(slopes_from_stm(at_one, DEFAULT_SINGULAR_THRESHOLD).unwrap().defect <= 1e-10);
    }

    #[test]
    fn rk4_defect_grows() {
        let ho = make_harmonic_oscillator(1.0, 1.0).unwrap();
        let z0 = PhaseState::from_slices(&[1.0], &[0.0]).unwrap();
        let stms = propagate_stm(&ho, &z0, StmMethod::Rk4, 0.1, 300).unwrap();
        let early = slopes_from_stm(&stms[10], 1e12).unwrap().defect;
        let late = slopes_from_stm(&stms[270], 1e12).unwrap().defect;
        assert!(late > 10.0 * early && early > 0.0);
    }

    #[test]
    fn chained_midpoint_stms() {
        let dw = crate::systems::make_double_well();
        let z0 = PhaseState::from_slices(&[0.9], &[0.2]).unwrap();
        let (full, states) = propagate_stm_with_trajectory(&dw, &z0, StmMethod::Midpoint, 0.05, 60).unwrap();
        let tail = propagate_stm(&dw, &states[25], StmMethod::Midpoint, 0.05, 35).unwrap();
        let chained = &tail.last().unwrap().phi * &full[25].phi;
        assert!((chained - &full[60].phi).amax() <= 1e-12);
    }

    #[test]
    fn exactness_series_masks_singular_windows() {
        let ho = make_harmonic_oscillator(1.0, 1.0).unwrap();
        let z0 = PhaseState::from_slices(&[1.0], &[0.0]).unwrap();
        let series = exactness_experiment(&ho, &z0, StmMethod::Midpoint, 0.01, 10.0, DEFAULT_EXACTNESS_MASK).unwrap();
        assert_eq!(series.samples.len(), 1001);
        assert!(series.samples[0].masked);
        assert!(series.masked_count() >= 1);
        let near_pi = series.samples.iter().filter(|s| (s.t - std::f64::consts::PI).abs() < 0.02).map(|s| s.conditioning).fold(0.0, f64::max);
        assert!(near_pi > 100.0);
        assert!(series.max_masked_defect() <= 1e-9);
        assert_eq!(series.to_csv(false).header(), &["t", "defect", "cond", "masked"]);
    }

    /// `exp(J S)` for symmetric `S` is symplectic.
    fn random_symplectic(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
        let a = Matrix::from_fn(2 * n, 2 * n, |_, _| rng.random_range(-scale..scale));
        let s = symmetrize(&a);
        (canonical_j(n) * s).exp()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symplectic_matrices_are_exact(seed in any::<u64>(), n in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random_symplectic(n, 0.6, &mut rng);
            let stm = StateTransitionMatrix { phi, t: 1.0 };
            if let Ok(slopes) = slopes_from_stm(&stm, 1e4) {
                prop_assert!(slopes.defect <= 1e-10 * slopes.conditioning.max(1.0), "{}", slopes.defect);
            }
        }

        #[test]
        fn defect_bounded_by_symplecticity(seed in any::<u64>(), n in 1usize..4, log_delta in -9.0f64..-4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let delta = 10f64.powf(log_delta);
            let base = random_symplectic(n, 0.6, &mut rng);
            let noise = Matrix::from_fn(2 * n, 2 * n, |_, _| rng.random_range(-1.0..1.0));
            let phi = &base + noise * delta;
            let stm = StateTransitionMatrix { phi, t: 1.0 };
            if let Ok(slopes) = slopes_from_stm(&stm, 1e2) {
                let eps = stm.symplectic_defect();
                let kappa = slopes.conditioning;
                prop_assert!(slopes.defect <= 10.0 * kappa * kappa * eps + 1e-12);
                prop_assert!(slopes.defect >= delta / 100.0 / kappa);
            }
        }
    }
}
