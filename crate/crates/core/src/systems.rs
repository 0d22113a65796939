//! Phase-space states, Hamiltonian descriptions and the example catalog.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, ensure_len, fd_gradient, fd_jacobian, fd_step, split, stack, symmetrize};
use crate::{Matrix, Vector};

/// Relative step of the central-difference derivative fallback.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// A point `(q, p)` of a `2n`-dimensional phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: Vector,
    pub p: Vector,
}

impl PhaseState {
    pub fn new(q: Vector, p: Vector) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::invalid("q", "phase space must have at least one degree of freedom"));
        }
        ensure_len(&p, q.len())?;
        ensure_finite(&q, "q")?;
        ensure_finite(&p, "p")?;
        Ok(Self { q, p })
    }

    pub fn from_slices(q: &[f64], p: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(q), Vector::from_column_slice(p))
    }

    /// Splits a stacked `(q, p)` vector.
    pub fn from_vector(z: &Vector) -> Result<Self> {
        if !z.len().is_multiple_of(2) {
            return Err(Error::DimensionMismatch { expected: z.len() + 1, got: z.len() });
        }
        let (q, p) = split(z);
        Self::new(q, p)
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn to_vector(&self) -> Vector {
        stack(&self.q, &self.p)
    }
}

/// Phase-space point augmented with time `t` and its conjugate momentum `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedPhaseState {
    pub q: Vector,
    pub t: f64,
    pub p: Vector,
    pub e: f64,
}

impl ExtendedPhaseState {
    pub fn new(state: PhaseState, t: f64, e: f64) -> Result<Self> {
        if !t.is_finite() || !e.is_finite() {
            return Err(Error::NonFinite("extended coordinates".into()));
        }
        Ok(Self { q: state.q, t, p: state.p, e })
    }

    pub fn phase(&self) -> PhaseState {
        PhaseState { q: self.q.clone(), p: self.p.clone() }
    }

    /// Coordinates ordered `(q, t, p, e)`, so the extended map is checked
    /// against the canonical `J` of size `2n + 2`.
    pub fn to_vector(&self) -> Vector {
        let n = self.q.len();
        let mut v = Vector::zeros(2 * n + 2);
        v.rows_mut(0, n).copy_from(&self.q);
        v[n] = self.t;
        v.rows_mut(n + 1, n).copy_from(&self.p);
        v[2 * n + 1] = self.e;
        v
    }

    pub fn from_vector(v: &Vector) -> Result<Self> {
        if v.len() < 4 || !v.len().is_multiple_of(2) {
            return Err(Error::DimensionMismatch { expected: 4, got: v.len() });
        }
        let n = v.len() / 2 - 1;
        let state = PhaseState::new(v.rows(0, n).into_owned(), v.rows(n + 1, n).into_owned())?;
        Self::new(state, v[n], v[2 * n + 1])
    }
}

/// A Hamiltonian on a `2n`-dimensional phase space with `z = (q, p)`.
///
/// Only [`Hamiltonian::energy`] is required; gradient and Hessian fall back
/// to central differences with step `fd_step() * max(1, |z_i|)`.
pub trait Hamiltonian: Send + Sync {
    fn dof(&self) -> usize;

    fn energy(&self, z: &Vector) -> Result<f64>;

    fn gradient(&self, z: &Vector) -> Result<Vector> {
        fd_gradient(|v| self.energy(v), z, self.fd_step())
    }

    /// Symmetric Hessian. The fallback differentiates the gradient.
    fn hessian(&self, z: &Vector) -> Result<Matrix> {
        let rel = self.fd_step();
        let jac = fd_jacobian(|v| self.gradient(v), z, |x| fd_step(x, rel))?;
        Ok(symmetrize(&jac))
    }

    fn fd_step(&self) -> f64 {
        DEFAULT_FD_STEP
    }

    fn as_separable(&self) -> Option<&SeparableSystem> {
        None
    }

    fn name(&self) -> &str {
        "custom"
    }

    fn energy_at(&self, state: &PhaseState) -> Result<f64> {
        self.energy(&state.to_vector())
    }
}

type ScalarFn = dyn Fn(&Vector) -> Result<f64> + Send + Sync;
type VectorFn = dyn Fn(&Vector) -> Result<Vector> + Send + Sync;

/// Hamiltonian given by closures; the gradient is optional.
pub struct CallbackHamiltonian {
    dof: usize,
    energy: Box<ScalarFn>,
    gradient: Option<Box<VectorFn>>,
    fd_step: f64,
}

impl CallbackHamiltonian {
    pub fn new(dof: usize, energy: impl Fn(&Vector) -> Result<f64> + Send + Sync + 'static) -> Self {
        Self { dof, energy: Box::new(energy), gradient: None, fd_step: DEFAULT_FD_STEP }
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&Vector) -> Result<Vector> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Box::new(gradient));
        self
    }

    pub fn with_fd_step(mut self, rel: f64) -> Self {
        self.fd_step = rel;
        self
    }
}

impl Hamiltonian for CallbackHamiltonian {
    fn dof(&self) -> usize {
        self.dof
    }

    fn energy(&self, z: &Vector) -> Result<f64> {
        ensure_len(z, 2 * self.dof)?;
        (self.energy)(z)
    }

    fn gradient(&self, z: &Vector) -> Result<Vector> {
        ensure_len(z, 2 * self.dof)?;
        match &self.gradient {
            Some(g) => g(z),
            None => fd_gradient(|v| (self.energy)(v), z, self.fd_step),
        }
    }

    fn fd_step(&self) -> f64 {
        self.fd_step
    }
}

/// Potential energy `V(q)` of a separable system.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, q: &Vector) -> Result<f64>;

    fn gradient(&self, q: &Vector) -> Result<Vector> {
        fd_gradient(|v| self.value(v), q, DEFAULT_FD_STEP)
    }

    fn hessian(&self, q: &Vector) -> Result<Matrix> {
        let jac = fd_jacobian(|v| self.gradient(v), q, |x| fd_step(x, DEFAULT_FD_STEP))?;
        Ok(symmetrize(&jac))
    }
}

/// `V(q) = (k/2)|q|²`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticPotential {
    pub stiffness: f64,
    pub dim: usize,
}

impl Potential for QuadraticPotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, q: &Vector) -> Result<f64> {
        Ok(0.5 * self.stiffness * q.norm_squared())
    }
    fn gradient(&self, q: &Vector) -> Result<Vector> {
        Ok(q * self.stiffness)
    }
    fn hessian(&self, _q: &Vector) -> Result<Matrix> {
        Ok(Matrix::identity(self.dim, self.dim) * self.stiffness)
    }
}

/// `V(q) = (q⁴ − q²)/2` in one dimension.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleWellPotential;

impl Potential for DoubleWellPotential {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, q: &Vector) -> Result<f64> {
        let x = q[0];
        Ok(0.5 * (x.powi(4) - x * x))
    }
    fn gradient(&self, q: &Vector) -> Result<Vector> {
        let x = q[0];
        Ok(Vector::from_element(1, 2.0 * x.powi(3) - x))
    }
    fn hessian(&self, q: &Vector) -> Result<Matrix> {
        Ok(Matrix::from_element(1, 1, 6.0 * q[0] * q[0] - 1.0))
    }
}

/// Potential from closures; gradient required, Hessian by differences.
pub struct CallbackPotential {
    dim: usize,
    value: Box<ScalarFn>,
    gradient: Box<VectorFn>,
}

impl CallbackPotential {
    pub fn new(
        dim: usize,
        value: impl Fn(&Vector) -> Result<f64> + Send + Sync + 'static,
        gradient: impl Fn(&Vector) -> Result<Vector> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, value: Box::new(value), gradient: Box::new(gradient) }
    }
}

impl Potential for CallbackPotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, q: &Vector) -> Result<f64> {
        (self.value)(q)
    }
    fn gradient(&self, q: &Vector) -> Result<Vector> {
        (self.gradient)(q)
    }
}

/// `H(q, p) = ½ pᵀM⁻¹p + V(q)` with a constant SPD mass matrix.
#[derive(Clone)]
pub struct SeparableSystem {
    mass: Matrix,
    mass_inv: Matrix,
    potential: Arc<dyn Potential>,
    name: String,
}

impl fmt::Debug for SeparableSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeparableSystem").field("name", &self.name).field("mass", &self.mass).finish()
    }
}

impl SeparableSystem {
    pub fn new(mass: Matrix, potential: Arc<dyn Potential>) -> Result<Self> {
        let n = potential.dim();
        if mass.nrows() != n || mass.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: mass.nrows() });
        }
        if (&mass - mass.transpose()).amax() > 1e-14 * mass.amax().max(1.0) {
            return Err(Error::invalid("mass", "mass matrix must be symmetric"));
        }
        let chol = mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("mass", "mass matrix must be positive definite"))?;
        Ok(Self { mass_inv: chol.inverse(), mass, potential, name: "separable".into() })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn mass(&self) -> &Matrix {
        &self.mass
    }

    pub fn mass_inv(&self) -> &Matrix {
        &self.mass_inv
    }

    pub fn potential(&self) -> &dyn Potential {
        self.potential.as_ref()
    }

    pub fn potential_value(&self, q: &Vector) -> Result<f64> {
        ensure_len(q, self.dof())?;
        self.potential.value(q)
    }

    pub fn potential_gradient(&self, q: &Vector) -> Result<Vector> {
        ensure_len(q, self.dof())?;
        self.potential.gradient(q)
    }

    pub fn potential_hessian(&self, q: &Vector) -> Result<Matrix> {
        ensure_len(q, self.dof())?;
        self.potential.hessian(q)
    }

    pub fn kinetic(&self, p: &Vector) -> f64 {
        0.5 * p.dot(&(&self.mass_inv * p))
    }

    /// `M⁻¹ p`.
    pub fn velocity(&self, p: &Vector) -> Vector {
        &self.mass_inv * p
    }

    /// `a(q) = −M⁻¹∇V(q)`.
    pub fn acceleration(&self, q: &Vector) -> Result<Vector> {
        Ok(-(&self.mass_inv * self.potential_gradient(q)?))
    }
}

impl Hamiltonian for SeparableSystem {
    fn dof(&self) -> usize {
        self.potential.dim()
    }

    fn energy(&self, z: &Vector) -> Result<f64> {
        ensure_len(z, 2 * self.dof())?;
        let (q, p) = split(z);
        Ok(self.kinetic(&p) + self.potential.value(&q)?)
    }

    fn gradient(&self, z: &Vector) -> Result<Vector> {
        ensure_len(z, 2 * self.dof())?;
        let (q, p) = split(z);
        Ok(stack(&self.potential.gradient(&q)?, &self.velocity(&p)))
    }

    fn hessian(&self, z: &Vector) -> Result<Matrix> {
        ensure_len(z, 2 * self.dof())?;
        let n = self.dof();
        let (q, _) = split(z);
        let mut h = Matrix::zeros(2 * n, 2 * n);
        h.view_mut((0, 0), (n, n)).copy_from(&self.potential.hessian(&q)?);
        h.view_mut((n, n), (n, n)).copy_from(&self.mass_inv);
        Ok(h)
    }

    fn as_separable(&self) -> Option<&SeparableSystem> {
        Some(self)
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// `H = p²/(2m) + k q²/2`.
pub fn make_harmonic_oscillator(mass: f64, stiffness: f64) -> Result<SeparableSystem> {
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::invalid("mass", format!("must be positive, got {mass}")));
    }
    if !(stiffness >= 0.0) || !stiffness.is_finite() {
        return Err(Error::invalid("stiffness", format!("must be non-negative, got {stiffness}")));
    }
    let potential = Arc::new(QuadraticPotential { stiffness, dim: 1 });
    Ok(SeparableSystem::new(Matrix::from_element(1, 1, mass), potential)?.named("harmonic"))
}

/// `H = p²/2 + (q⁴ − q²)/2`.
pub fn make_double_well() -> SeparableSystem {
    SeparableSystem::new(Matrix::identity(1, 1), Arc::new(DoubleWellPotential))
        .expect("unit mass is SPD")
        .named("double-well")
}

/// Free particle in `dim` dimensions with unit mass.
pub fn make_free_particle(dim: usize) -> SeparableSystem {
    SeparableSystem::new(Matrix::identity(dim, dim), Arc::new(QuadraticPotential { stiffness: 0.0, dim }))
        .expect("unit mass is SPD")
        .named("free")
}

pub mod earth {
    //! Constants of the zonal Earth model (km, s).

    pub const GM: f64 = 398_600.440_5;
    pub const EARTH_RADIUS: f64 = 6378.137;
    /// Reference orbit radius used as length unit.
    pub const REFERENCE_RADIUS: f64 = 7000.0;
    pub const J2: f64 = 1.082626675e-3;
    pub const J3: f64 = 2.532436e-6;

    /// Seconds per normalized time unit.
    pub fn time_unit() -> f64 {
        (REFERENCE_RADIUS.powi(3) / GM).sqrt()
    }
}

/// Satellite in the Earth's field truncated after the J3 zonal harmonic,
/// in units where the reference radius and `GM` are one.
#[derive(Debug, Clone, Copy)]
pub struct EarthZonal {
    j2: f64,
    j3: f64,
    alpha: f64,
    beta: f64,
}

impl EarthZonal {
    pub fn with_coefficients(j2: f64, j3: f64) -> Self {
        let ratio = earth::EARTH_RADIUS / earth::REFERENCE_RADIUS;
        Self { j2, j3, alpha: 0.5 * ratio * ratio, beta: 0.5 * ratio.powi(3) }
    }

    fn radius_squared(q: &Vector) -> Result<f64> {
        let s = q.norm_squared();
        if s == 0.0 {
            return Err(Error::Singularity("earth model evaluated at r = 0".into()));
        }
        Ok(s)
    }

    /// Gravitational potential at position `q = (x, y, z)`.
    pub fn potential(&self, q: &Vector) -> Result<f64> {
        let s = Self::radius_squared(q)?;
        let r = s.sqrt();
        let z = q[2];
        let zonal2 = self.alpha / s * (3.0 * z * z / s - 1.0) * self.j2;
        let zonal3 = self.beta / (s * s) * (5.0 * z.powi(3) / s - 3.0 * z) * self.j3;
        Ok(-(1.0 - zonal2 - zonal3) / r)
    }

    pub fn potential_gradient(&self, q: &Vector) -> Result<Vector> {
        let s = Self::radius_squared(q)?;
        let z = q[2];
        let (aj2, bj3) = (self.alpha * self.j2, self.beta * self.j3);
        // U written in powers of s = r²; dU/ds holds z fixed.
        let du_ds = 0.5 * s.powf(-1.5) - 7.5 * aj2 * z * z * s.powf(-3.5) + 1.5 * aj2 * s.powf(-2.5)
            - 17.5 * bj3 * z.powi(3) * s.powf(-4.5)
            + 7.5 * bj3 * z * s.powf(-3.5);
        let du_dz = 6.0 * aj2 * z * s.powf(-2.5) + 15.0 * bj3 * z * z * s.powf(-3.5) - 3.0 * bj3 * s.powf(-2.5);
        let mut g = q * (2.0 * du_ds);
        g[2] += du_dz;
        Ok(g)
    }

    /// Initial state of the eccentric inclined test orbit (e = 0.3, i = π/3).
    pub fn reference_initial_state() -> PhaseState {
        let speed = 1.3f64.sqrt();
        let incl = std::f64::consts::FRAC_PI_3;
        PhaseState::from_slices(&[1.0, 0.0, 0.0], &[0.0, speed * incl.cos(), speed * incl.sin()])
            .expect("finite constants")
    }
}

impl Hamiltonian for EarthZonal {
    fn dof(&self) -> usize {
        3
    }

    fn energy(&self, z: &Vector) -> Result<f64> {
        ensure_len(z, 6)?;
        let (q, p) = split(z);
        Ok(0.5 * p.norm_squared() + self.potential(&q)?)
    }

    fn gradient(&self, z: &Vector) -> Result<Vector> {
        ensure_len(z, 6)?;
        let (q, p) = split(z);
        Ok(stack(&self.potential_gradient(&q)?, &p))
    }

    fn hessian(&self, z: &Vector) -> Result<Matrix> {
        ensure_len(z, 6)?;
        let (q, _) = split(z);
        let vq = fd_jacobian(|x| self.potential_gradient(x), &q, |x| fd_step(x, 1e-5))?;
        let mut h = Matrix::zeros(6, 6);
        h.view_mut((0, 0), (3, 3)).copy_from(&symmetrize(&vq));
        h.view_mut((3, 3), (3, 3)).fill_with_identity();
        Ok(h)
    }

    fn name(&self) -> &str {
        "earth-j2j3"
    }
}

pub fn make_earth_j2j3() -> EarthZonal {
    EarthZonal::with_coefficients(earth::J2, earth::J3)
}

/// Reduced Hamiltonian of the Heisenberg optimal-control problem after the
/// control has been eliminated through stationarity:
/// `H̄ = −½[(p_x + p_z y)² + (p_y − p_z x)²]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeisenbergReduced;

impl HeisenbergReduced {
    /// The two combinations that equal minus the optimal controls.
    pub fn control_combinations(z: &Vector) -> (f64, f64) {
        let (x, y, px, py, pz) = (z[0], z[1], z[3], z[4], z[5]);
        (px + pz * y, py - pz * x)
    }
}

impl Hamiltonian for HeisenbergReduced {
    fn dof(&self) -> usize {
        3
    }

    fn energy(&self, z: &Vector) -> Result<f64> {
        ensure_len(z, 6)?;
        let (a, b) = Self::control_combinations(z);
        Ok(-0.5 * (a * a + b * b))
    }

    fn gradient(&self, z: &Vector) -> Result<Vector> {
        ensure_len(z, 6)?;
        let (x, y, pz) = (z[0], z[1], z[5]);
        let (a, b) = Self::control_combinations(z);
        Ok(Vector::from_vec(vec![b * pz, -a * pz, 0.0, -a, -b, -a * y + b * x]))
    }

    fn hessian(&self, z: &Vector) -> Result<Matrix> {
        ensure_len(z, 6)?;
        let (x, y, pz) = (z[0], z[1], z[5]);
        let (a, b) = Self::control_combinations(z);
        let mut h = Matrix::zeros(6, 6);
        let mut set = |i: usize, j: usize, v: f64| {
            h[(i, j)] = v;
            h[(j, i)] = v;
        };
        set(0, 0, -pz * pz);
        set(0, 4, pz);
        set(0, 5, b - x * pz);
        set(1, 1, -pz * pz);
        set(1, 3, -pz);
        set(1, 5, -a - y * pz);
        set(3, 3, -1.0);
        set(3, 5, -y);
        set(4, 4, -1.0);
        set(4, 5, x);
        set(5, 5, -(x * x + y * y));
        Ok(h)
    }

    fn name(&self) -> &str {
        "heisenberg"
    }
}

pub fn make_heisenberg_reduced() -> HeisenbergReduced {
    HeisenbergReduced
}

/// Catalog keys accepted by the experiment runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Harmonic,
    DoubleWell,
    EarthJ2J3,
    Heisenberg,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] =
        [SystemKind::Harmonic, SystemKind::DoubleWell, SystemKind::EarthJ2J3, SystemKind::Heisenberg];

    pub fn key(self) -> &'static str {
        match self {
            SystemKind::Harmonic => "harmonic",
            SystemKind::DoubleWell => "double-well",
            SystemKind::EarthJ2J3 => "earth-j2j3",
            SystemKind::Heisenberg => "heisenberg",
        }
    }

    /// Builds the catalog instance; the oscillator uses unit mass and stiffness.
    pub fn build(self) -> Arc<dyn Hamiltonian> {
        match self {
            SystemKind::Harmonic => Arc::new(make_harmonic_oscillator(1.0, 1.0).expect("valid constants")),
            SystemKind::DoubleWell => Arc::new(make_double_well()),
            SystemKind::EarthJ2J3 => Arc::new(make_earth_j2j3()),
            SystemKind::Heisenberg => Arc::new(make_heisenberg_reduced()),
        }
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL.into_iter().find(|k| k.key() == s).ok_or_else(|| Error::UnknownKey {
            key: s.to_string(),
            valid: SystemKind::ALL.map(|k| k.key()).join(", "),
        })
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}
