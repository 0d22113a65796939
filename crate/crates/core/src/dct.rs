//! Discrete canonical transformations `Z_k = A_k z_k + B_k`.
//!
//! Affine maps commute with the midpoint average, so mapping samples one by
//! one is consistent with the midpoint geometry. Maps are only applied to
//! midpoint trajectories; the Störmer pairing `(q_k, p_{k+1})` is not a
//! per-sample quantity.

use crate::diagnostics::energy_error_series;
use crate::error::{Error, Result};
use crate::integrators::{integrate, Scheme, StepperConfig, Trajectory};
use crate::linalg::{cosymplectic_defect, inf_norm, inverse, solve};
use crate::report::{fmt_f64, CsvTable};
use crate::systems::{Hamiltonian, PhaseState};
use crate::{Matrix, Vector};

/// Tolerance on `‖A_k J A_kᵀ − J‖_∞` for certification.
pub const CERTIFICATION_TOL: f64 = 1e-12;

/// Per-step affine map on phase space.
pub trait CanonicalMap: Send + Sync {
    /// Phase-space dimension `2n`.
    fn dim(&self) -> usize;
    fn matrix(&self, k: usize) -> Matrix;
    fn offset(&self, k: usize) -> Vector;

    fn apply(&self, k: usize, z: &Vector) -> Result<Vector> {
        crate::linalg::ensure_len(z, self.dim())?;
        Ok(self.matrix(k) * z + self.offset(k))
    }

    /// `A_k⁻¹ (Z − B_k)`.
    fn invert(&self, k: usize, big_z: &Vector) -> Result<Vector> {
        crate::linalg::ensure_len(big_z, self.dim())?;
        solve(&self.matrix(k), &(big_z - self.offset(k)), "canonical map inverse")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityMap {
    pub dim: usize,
}

impl CanonicalMap for IdentityMap {
    fn dim(&self) -> usize {
        self.dim
    }
    fn matrix(&self, _k: usize) -> Matrix {
        Matrix::identity(self.dim, self.dim)
    }
    fn offset(&self, _k: usize) -> Vector {
        Vector::zeros(self.dim)
    }
}

/// Plane rotation by `kθ` at step `k`, with zero offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMap {
    pub theta: f64,
}

impl RotationMap {
    pub fn new(theta: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(Error::invalid("theta", "must be finite"));
        }
        Ok(Self { theta })
    }

    pub fn default_theta() -> f64 {
        0.99f64.acos()
    }
}

impl Default for RotationMap {
    fn default() -> Self {
        Self { theta: Self::default_theta() }
    }
}

impl CanonicalMap for RotationMap {
    fn dim(&self) -> usize {
        2
    }
    fn matrix(&self, k: usize) -> Matrix {
        let angle = k as f64 * self.theta;
        let (s, c) = angle.sin_cos();
        Matrix::from_row_slice(2, 2, &[c, -s, s, c])
    }
    fn offset(&self, _k: usize) -> Vector {
        Vector::zeros(2)
    }
}

/// Step-independent `Z = A z + B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub a: Matrix,
    pub b: Vector,
}

impl AffineMap {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        let dim = a.nrows();
        if a.ncols() != dim || !dim.is_multiple_of(2) || dim == 0 {
            return Err(Error::invalid("A", format!("must be square of even size, got {}x{}", dim, a.ncols())));
        }
        if b.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: b.len() });
        }
        Ok(Self { a, b })
    }
}

impl CanonicalMap for AffineMap {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn matrix(&self, _k: usize) -> Matrix {
        self.a.clone()
    }
    fn offset(&self, _k: usize) -> Vector {
        self.b.clone()
    }
}

/// `outer ∘ inner`: `A = A_o A_i`, `B = A_o B_i + B_o`.
pub struct ComposedMap<O, I> {
    pub outer: O,
    pub inner: I,
}

impl<O: CanonicalMap, I: CanonicalMap> ComposedMap<O, I> {
    pub fn new(outer: O, inner: I) -> Result<Self> {
        if outer.dim() != inner.dim() {
            return Err(Error::DimensionMismatch { expected: inner.dim(), got: outer.dim() });
        }
        Ok(Self { outer, inner })
    }
}

impl<O: CanonicalMap, I: CanonicalMap> CanonicalMap for ComposedMap<O, I> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn matrix(&self, k: usize) -> Matrix {
        self.outer.matrix(k) * self.inner.matrix(k)
    }
    fn offset(&self, k: usize) -> Vector {
        self.outer.matrix(k) * self.inner.offset(k) + self.outer.offset(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub canonical: bool,
    pub max_defect: f64,
    pub worst_k: usize,
    /// Largest `‖A_k‖_∞ ‖A_k⁻¹‖_∞` over the tested steps.
    pub max_condition: f64,
}

/// Checks `A_k J A_kᵀ = J` for every `k` in `steps`.
pub fn certify_canonical(map: &dyn CanonicalMap, steps: impl IntoIterator<Item = usize>, tol: f64) -> Certificate {
    let mut cert = Certificate { canonical: true, max_defect: 0.0, worst_k: 0, max_condition: 0.0 };
    for k in steps {
        let a = map.matrix(k);
        let defect = cosymplectic_defect(&a);
        if !(defect <= cert.max_defect) {
            cert.max_defect = defect;
            cert.worst_k = k;
        }
        let condition = inverse(&a, "").map_or(f64::INFINITY, |inv| inf_norm(&a) * inf_norm(&inv));
        cert.max_condition = cert.max_condition.max(condition);
        if !(defect <= tol) {
            cert.canonical = false;
        }
    }
    cert
}

fn require_certified(map: &dyn CanonicalMap, len: usize) -> Result<()> {
    let cert = certify_canonical(map, 0..len, CERTIFICATION_TOL);
    if cert.canonical {
        Ok(())
    } else {
        Err(Error::invalid(
            "map",
            format!("not canonical at step {} (defect {:e})", cert.worst_k, cert.max_defect),
        ))
    }
}

/// Maps every sample `z_k` to `A_k z_k + B_k`; times and metadata are kept.
pub fn pushforward_trajectory(map: &dyn CanonicalMap, traj: &Trajectory) -> Result<Trajectory> {
    if 2 * traj.dof() != map.dim() {
        return Err(Error::DimensionMismatch { expected: map.dim(), got: 2 * traj.dof() });
    }
    require_certified(map, traj.len())?;
    let states = traj
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| PhaseState::from_vector(&map.apply(k, &s.to_vector())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { times: traj.times.clone(), states, meta: traj.meta.clone(), scheme: traj.scheme })
}

/// `K = H ∘ f_k⁻¹` at a fixed step `k`, with `∇K = A_k⁻ᵀ ∇H`.
pub struct TransformedHamiltonian<'a> {
    system: &'a dyn Hamiltonian,
    a_inv: Matrix,
    map_offset: Vector,
}

impl<'a> TransformedHamiltonian<'a> {
    pub fn new(system: &'a dyn Hamiltonian, map: &dyn CanonicalMap, k: usize) -> Result<Self> {
        if 2 * system.dof() != map.dim() {
            return Err(Error::DimensionMismatch { expected: map.dim(), got: 2 * system.dof() });
        }
        let a_inv = inverse(&map.matrix(k), "canonical map inverse")?;
        Ok(Self { system, a_inv, map_offset: map.offset(k) })
    }

    fn pullback(&self, big_z: &Vector) -> Vector {
        &self.a_inv * (big_z - &self.map_offset)
    }
}

impl Hamiltonian for TransformedHamiltonian<'_> {
    fn dof(&self) -> usize {
        self.system.dof()
    }
    fn energy(&self, z: &Vector) -> Result<f64> {
        crate::linalg::ensure_len(z, 2 * self.dof())?;
        self.system.energy(&self.pullback(z))
    }
    fn gradient(&self, z: &Vector) -> Result<Vector> {
        crate::linalg::ensure_len(z, 2 * self.dof())?;
        Ok(self.a_inv.transpose() * self.system.gradient(&self.pullback(z))?)
    }
    fn hessian(&self, z: &Vector) -> Result<Matrix> {
        crate::linalg::ensure_len(z, 2 * self.dof())?;
        Ok(self.a_inv.transpose() * self.system.hessian(&self.pullback(z))? * &self.a_inv)
    }
    fn name(&self) -> &str {
        "transformed"
    }
}

/// Energy error `K_k(Z_k) − K_0(Z_0)` of the mapped trajectory, where
/// `K_k = H ∘ f_k⁻¹`. `traj` holds the original midpoint samples.
pub fn transformed_energy_error(map: &dyn CanonicalMap, traj: &Trajectory, sys: &dyn Hamiltonian) -> Result<Vec<f64>> {
    if traj.scheme != Some(Scheme::Midpoint) {
        let got = traj.scheme.map_or("unknown", |s| s.key());
        return Err(Error::GeometryMismatch(format!(
            "canonical maps act on midpoint trajectories, got {got}"
        )));
    }
    let mapped = pushforward_trajectory(map, traj)?;
    let energies = mapped
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| sys.energy(&map.invert(k, &s.to_vector())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(energies.iter().map(|e| e - energies[0]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyInvarianceReport {
    pub original: Vec<f64>,
    pub transformed: Vec<f64>,
}

impl EnergyInvarianceReport {
    pub fn max_difference(&self) -> f64 {
        self.original.iter().zip(&self.transformed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Columns `k, original, transformed, abs_difference`.
    pub fn to_csv(&self, skip_initial: bool) -> CsvTable {
        let mut table = CsvTable::new(["k", "original", "transformed", "abs_difference"]);
        for (k, (a, b)) in self.original.iter().zip(&self.transformed).enumerate().skip(usize::from(skip_initial)) {
            table.push_row(vec![k.to_string(), fmt_f64(*a), fmt_f64(*b), fmt_f64((a - b).abs())]);
        }
        table
    }
}

/// Integrates with midpoint and compares the energy error before and after
/// mapping.
pub fn energy_invariance_experiment(
    map: &dyn CanonicalMap,
    sys: &dyn Hamiltonian,
    initial: &PhaseState,
    n_steps: usize,
    cfg: &StepperConfig,
) -> Result<EnergyInvarianceReport> {
    let traj = integrate(Scheme::Midpoint, sys, initial, n_steps, cfg)?;
    let original = energy_error_series(&traj, sys)?;
    let transformed = transformed_energy_error(map, &traj, sys)?;
    Ok(EnergyInvarianceReport { original, transformed })
}
