//! Discrete maximum principle for `min Σ g(x, u) τ` subject to `Δx = f(x, u)`.
//!
//! The control Hamiltonian is `H(x, p, u) = g(x, u) + ⟨p, f(x, u)⟩`. On each
//! interval the conditions are evaluated at the geometry's node triple
//! `(x^d, p^d, u^d)`:
//!
//! * Störmer: `(x_k, p_{k+1}, u_k)`,
//! * midpoint: `((x_k + x_{k+1})/2, (p_k + p_{k+1})/2, u_k)` with one control
//!   per interval.
//!
//! and read `Δx = D₂H`, `Δp = −D₁H`, `0 = D₃H`. When `D₃H = 0` can be solved
//! for `u`, the reduced Hamiltonian `H̄(x, p) = H(x, p, u*(x, p))` is an
//! ordinary [`Hamiltonian`] and the same sequence is produced by the
//! matching stepper (see [`verify_commutative_diagram`]).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::integrators::{
    midpoint_step, midpoint_tangent, stormer_general_step, stormer_general_tangent, StepperConfig,
};
use crate::linalg::{ensure_len, fd_jacobian, fd_step, inf_norm, inverse, max_abs, solve, split, stack};
use crate::newton::{solve_newton, NewtonOptions};
use crate::report::{indexed_columns, CsvTable};
use crate::systems::{make_heisenberg_reduced, Hamiltonian, PhaseState};
use crate::{Matrix, Vector};

/// Relative step for finite-difference fallbacks in this module.
pub const CONTROL_FD_STEP: f64 = 1e-6;
/// Default tolerance on `‖x_N − x_T‖_∞` for shooting.
pub const DEFAULT_SHOOT_TOL: f64 = 1e-10;

/// Dynamics `f(x, u)` and running cost `g(x, u)`.
///
/// Derivatives default to central differences.
pub trait ControlDynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector>;
    fn running_cost(&self, x: &Vector, u: &Vector) -> Result<f64>;

    /// `(∂f/∂x, ∂f/∂u)`.
    fn dynamics_jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)> {
        let step = |v: f64| fd_step(v, CONTROL_FD_STEP);
        let fx = fd_jacobian(|xv| self.dynamics(xv, u), x, step)?;
        let fu = if u.is_empty() {
            Matrix::zeros(self.state_dim(), 0)
        } else {
            fd_jacobian(|uv| self.dynamics(x, uv), u, step)?
        };
        Ok((fx, fu))
    }

    /// `(∂g/∂x, ∂g/∂u)`.
    fn cost_gradients(&self, x: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
        let gx = crate::linalg::fd_gradient(|xv| self.running_cost(xv, u), x, CONTROL_FD_STEP)?;
        let gu = crate::linalg::fd_gradient(|uv| self.running_cost(x, uv), u, CONTROL_FD_STEP)?;
        Ok((gx, gu))
    }

    /// Closed-form solution of `D₃H(x, p, u) = 0`, when one is known.
    fn eliminate(&self, _x: &Vector, _p: &Vector) -> Option<Vector> {
        None
    }

    /// Starting point for Newton-in-`u` elimination.
    fn control_guess(&self, _x: &Vector, _p: &Vector) -> Vector {
        Vector::zeros(self.control_dim())
    }

    /// Registered reduced Hamiltonian with analytic derivatives.
    fn reduced_system(&self) -> Option<Box<dyn Hamiltonian>> {
        None
    }

    fn name(&self) -> &str {
        "control problem"
    }
}

/// `H(x, p, u) = g(x, u) + ⟨p, f(x, u)⟩` and its partials.
#[derive(Clone, Copy)]
pub struct ControlHamiltonian<'a> {
    pub ocp: &'a dyn ControlDynamics,
}

impl<'a> ControlHamiltonian<'a> {
    pub fn new(ocp: &'a dyn ControlDynamics) -> Self {
        Self { ocp }
    }

    pub fn value(&self, x: &Vector, p: &Vector, u: &Vector) -> Result<f64> {
        Ok(self.ocp.running_cost(x, u)? + p.dot(&self.ocp.dynamics(x, u)?))
    }

    pub fn d1(&self, x: &Vector, p: &Vector, u: &Vector) -> Result<Vector> {
        let (fx, _) = self.ocp.dynamics_jacobians(x, u)?;
        let (gx, _) = self.ocp.cost_gradients(x, u)?;
        Ok(gx + fx.transpose() * p)
    }

    pub fn d2(&self, x: &Vector, _p: &Vector, u: &Vector) -> Result<Vector> {
        self.ocp.dynamics(x, u)
    }

    pub fn d3(&self, x: &Vector, p: &Vector, u: &Vector) -> Result<Vector> {
        let (_, fu) = self.ocp.dynamics_jacobians(x, u)?;
        let (_, gu) = self.ocp.cost_gradients(x, u)?;
        Ok(gu + fu.transpose() * p)
    }

    /// `∂²H/∂u²` by differences of [`Self::d3`].
    pub fn d33(&self, x: &Vector, p: &Vector, u: &Vector) -> Result<Matrix> {
        fd_jacobian(|uv| self.d3(x, p, uv), u, |v| fd_step(v, CONTROL_FD_STEP))
    }
}

/// Solves `D₃H(x, p, u) = 0` for `u`.
pub fn optimal_control(ocp: &dyn ControlDynamics, x: &Vector, p: &Vector, newton: NewtonOptions) -> Result<Vector> {
    if ocp.control_dim() == 0 {
        return Ok(Vector::zeros(0));
    }
    if let Some(u) = ocp.eliminate(x, p) {
        return Ok(u);
    }
    let ham = ControlHamiltonian::new(ocp);
    solve_newton(ocp.control_guess(x, p), newton, "control elimination", |u| Ok((ham.d3(x, p, u)?, ham.d33(x, p, u)?)))
        .map(|out| out.x)
        .map_err(|e| Error::EliminationFailed(e.to_string()))
}

/// `H̄(x, p) = H(x, p, u*(x, p))` for a problem without a registered
/// closed form. By stationarity `∇_x H̄ = D₁H` and `∇_p H̄ = f`.
pub struct ReducedHamiltonian<'a> {
    ocp: &'a dyn ControlDynamics,
    newton: NewtonOptions,
}

impl<'a> ReducedHamiltonian<'a> {
    pub fn new(ocp: &'a dyn ControlDynamics) -> Self {
        // Finite-difference partials put a floor near 1e-10 on `D₃H`.
        Self { ocp, newton: NewtonOptions { tol: 1e-10, max_iter: 50, polish: 1 } }
    }

    fn control_at(&self, z: &Vector) -> Result<(Vector, Vector, Vector)> {
        ensure_len(z, 2 * self.ocp.state_dim())?;
        let (x, p) = split(z);
        let u = optimal_control(self.ocp, &x, &p, self.newton)?;
        Ok((x, p, u))
    }
}

impl Hamiltonian for ReducedHamiltonian<'_> {
    fn dof(&self) -> usize {
        self.ocp.state_dim()
    }
    fn energy(&self, z: &Vector) -> Result<f64> {
        let (x, p, u) = self.control_at(z)?;
        ControlHamiltonian::new(self.ocp).value(&x, &p, &u)
    }
    fn gradient(&self, z: &Vector) -> Result<Vector> {
        let (x, p, u) = self.control_at(z)?;
        let ham = ControlHamiltonian::new(self.ocp);
        Ok(stack(&ham.d1(&x, &p, &u)?, &ham.d2(&x, &p, &u)?))
    }
    fn name(&self) -> &str {
        "reduced"
    }
}

/// Reduced Hamiltonian: the registered closed form if the problem has one,
/// otherwise elimination by Newton in `u`. The continuous and discrete
/// reductions coincide because `g_d = g` and `f_d = f`.
pub fn eliminate_control(ocp: &dyn ControlDynamics) -> Box<dyn Hamiltonian + '_> {
    match ocp.reduced_system() {
        Some(sys) => sys,
        None => Box::new(ReducedHamiltonian::new(ocp)),
    }
}

/// `f = u`, `g = ½‖u‖²` in `n` dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorPlant {
    pub dim: usize,
}

impl ControlDynamics for IntegratorPlant {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn control_dim(&self) -> usize {
        self.dim
    }
    fn dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        ensure_len(x, self.dim)?;
        ensure_len(u, self.dim)?;
        Ok(u.clone())
    }
    fn running_cost(&self, _x: &Vector, u: &Vector) -> Result<f64> {
        Ok(0.5 * u.norm_squared())
    }
    fn dynamics_jacobians(&self, _x: &Vector, _u: &Vector) -> Result<(Matrix, Matrix)> {
        Ok((Matrix::zeros(self.dim, self.dim), Matrix::identity(self.dim, self.dim)))
    }
    fn cost_gradients(&self, _x: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
        Ok((Vector::zeros(self.dim), u.clone()))
    }
    fn eliminate(&self, _x: &Vector, p: &Vector) -> Option<Vector> {
        Some(-p)
    }
    fn name(&self) -> &str {
        "integrator plant"
    }
}

/// `ẋ = u`, `ẏ = v`, `ż = u y − v x` with `g = ½(u² + v²)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeisenbergProblem;

impl ControlDynamics for HeisenbergProblem {
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        ensure_len(x, 3)?;
        ensure_len(u, 2)?;
        Ok(Vector::from_vec(vec![u[0], u[1], u[0] * x[1] - u[1] * x[0]]))
    }
    fn running_cost(&self, _x: &Vector, u: &Vector) -> Result<f64> {
        Ok(0.5 * u.norm_squared())
    }
    fn dynamics_jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)> {
        let fx = Matrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -u[1], u[0], 0.0]);
        let fu = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, x[1], -x[0]]);
        Ok((fx, fu))
    }
    fn cost_gradients(&self, _x: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
        Ok((Vector::zeros(3), u.clone()))
    }
    fn eliminate(&self, x: &Vector, p: &Vector) -> Option<Vector> {
        Some(Vector::from_vec(vec![-(p[0] + p[2] * x[1]), -(p[1] - p[2] * x[0])]))
    }
    fn reduced_system(&self) -> Option<Box<dyn Hamiltonian>> {
        Some(Box::new(make_heisenberg_reduced()))
    }
    fn name(&self) -> &str {
        "heisenberg"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Stormer,
    Midpoint,
}

impl Geometry {
    pub const KEYS: [&'static str; 2] = ["stormer", "midpoint"];

    pub fn key(self) -> &'static str {
        match self {
            Geometry::Stormer => "stormer",
            Geometry::Midpoint => "midpoint",
        }
    }

    /// `(x^d, p^d)` for one interval.
    pub fn nodes(self, x0: &Vector, x1: &Vector, p0: &Vector, p1: &Vector) -> (Vector, Vector) {
        match self {
            Geometry::Stormer => (x0.clone(), p1.clone()),
            Geometry::Midpoint => ((x0 + x1) * 0.5, (p0 + p1) * 0.5),
        }
    }

    /// Time at which interval `k`'s control acts.
    fn control_time(self, k: usize, tau: f64) -> f64 {
        match self {
            Geometry::Stormer => k as f64 * tau,
            Geometry::Midpoint => (k as f64 + 0.5) * tau,
        }
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stormer" => Ok(Geometry::Stormer),
            "midpoint" => Ok(Geometry::Midpoint),
            other => Err(Error::UnknownKey { key: other.into(), valid: Self::KEYS.join(", ") }),
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

type ConstraintFn = dyn Fn(&Vector) -> Result<Vector> + Send + Sync;

/// Endpoint constraint `φ(x) = 0` with `count` components.
#[derive(Clone)]
pub struct BoundaryConstraint {
    pub count: usize,
    func: Arc<ConstraintFn>,
}

impl BoundaryConstraint {
    pub fn new(count: usize, func: impl Fn(&Vector) -> Result<Vector> + Send + Sync + 'static) -> Self {
        Self { count, func: Arc::new(func) }
    }

    /// `φ(x) = x − target`.
    pub fn fixed(target: Vector) -> Self {
        let count = target.len();
        Self::new(count, move |x| {
            ensure_len(x, target.len())?;
            Ok(x - &target)
        })
    }

    pub fn value(&self, x: &Vector) -> Result<Vector> {
        let v = (self.func)(x)?;
        ensure_len(&v, self.count)?;
        Ok(v)
    }

    pub fn jacobian(&self, x: &Vector) -> Result<Matrix> {
        fd_jacobian(|xv| self.value(xv), x, |v| fd_step(v, CONTROL_FD_STEP))
    }
}

impl fmt::Debug for BoundaryConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundaryConstraint").field("count", &self.count).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum Boundary {
    HardEndpoints { initial: Vector, terminal: Vector },
    /// `φ₀(x₀) = 0`, `φ_N(x_N) = 0` with multipliers; transversality reads
    /// `p₀ = −D₁φ₀ᵀλ₀` and `p_N = D₁φ_Nᵀλ_N` in both geometries.
    Transversality { initial: BoundaryConstraint, terminal: BoundaryConstraint },
}

impl Boundary {
    fn multiplier_counts(&self) -> (usize, usize) {
        match self {
            Boundary::HardEndpoints { .. } => (0, 0),
            Boundary::Transversality { initial, terminal } => (initial.count, terminal.count),
        }
    }
}

fn check_sequences(n: usize, m: usize, xs: &[Vector], ps: &[Vector], us: &[Vector]) -> Result<()> {
    if xs.is_empty() || xs.len() != ps.len() || us.len() + 1 != xs.len() {
        return Err(Error::invalid(
            "sequences",
            format!("need N+1 states and costates and N controls, got {}, {}, {}", xs.len(), ps.len(), us.len()),
        ));
    }
    for v in xs.iter().chain(ps) {
        ensure_len(v, n)?;
    }
    for u in us {
        ensure_len(u, m)?;
    }
    Ok(())
}

fn interval_residual(
    ham: &ControlHamiltonian<'_>,
    geometry: Geometry,
    tau: f64,
    (x0, x1, p0, p1, u): (&Vector, &Vector, &Vector, &Vector, &Vector),
) -> Result<Vector> {
    let (xd, pd) = geometry.nodes(x0, x1, p0, p1);
    let state = (x1 - x0) / tau - ham.d2(&xd, &pd, u)?;
    let costate = (p1 - p0) / tau + ham.d1(&xd, &pd, u)?;
    let stationarity = ham.d3(&xd, &pd, u)?;
    let mut out = Vector::zeros(state.len() + costate.len() + stationarity.len());
    out.rows_mut(0, state.len()).copy_from(&state);
    out.rows_mut(state.len(), costate.len()).copy_from(&costate);
    out.rows_mut(2 * state.len(), stationarity.len()).copy_from(&stationarity);
    Ok(out)
}

/// Stacked state, costate and stationarity residuals of every interval.
/// `N = 0` gives an empty vector.
pub fn dmp_residual(
    ocp: &dyn ControlDynamics,
    geometry: Geometry,
    xs: &[Vector],
    ps: &[Vector],
    us: &[Vector],
    tau: f64,
) -> Result<Vector> {
    let (n, m) = (ocp.state_dim(), ocp.control_dim());
    check_sequences(n, m, xs, ps, us)?;
    let ham = ControlHamiltonian::new(ocp);
    let block = 2 * n + m;
    let mut out = Vector::zeros(us.len() * block);
    for k in 0..us.len() {
        let r = interval_residual(&ham, geometry, tau, (&xs[k], &xs[k + 1], &ps[k], &ps[k + 1], &us[k]))?;
        out.rows_mut(k * block, block).copy_from(&r);
    }
    Ok(out)
}

/// Endpoint residuals; `multipliers` is required for transversality.
pub fn boundary_residual(
    boundary: &Boundary,
    xs: &[Vector],
    ps: &[Vector],
    multipliers: Option<(&Vector, &Vector)>,
) -> Result<Vector> {
    let (first, last) = match (xs.first(), xs.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("sequences", "empty state sequence")),
    };
    match boundary {
        Boundary::HardEndpoints { initial, terminal } => {
            ensure_len(first, initial.len())?;
            ensure_len(last, terminal.len())?;
            Ok(stack(&(first - initial), &(last - terminal)))
        }
        Boundary::Transversality { initial, terminal } => {
            let (l0, ln) = multipliers.ok_or_else(|| Error::invalid("multipliers", "required for transversality"))?;
            ensure_len(l0, initial.count)?;
            ensure_len(ln, terminal.count)?;
            let p0 = &ps[0];
            let pn = &ps[ps.len() - 1];
            let t0 = p0 + initial.jacobian(first)?.transpose() * l0;
            let tn = pn - terminal.jacobian(last)?.transpose() * ln;
            Ok(stack(&stack(&initial.value(first)?, &terminal.value(last)?), &stack(&t0, &tn)))
        }
    }
}

/// Discrete cost `Σ g(x^d_k, u_k) τ` with the geometry's state node.
pub fn cost_of(ocp: &dyn ControlDynamics, geometry: Geometry, xs: &[Vector], us: &[Vector], tau: f64) -> Result<f64> {
    if xs.len() != us.len() + 1 {
        return Err(Error::invalid("sequences", "need N+1 states and N controls"));
    }
    us.iter().enumerate().try_fold(0.0, |acc, (k, u)| {
        let xd = match geometry {
            Geometry::Stormer => xs[k].clone(),
            Geometry::Midpoint => (&xs[k] + &xs[k + 1]) * 0.5,
        };
        Ok(acc + ocp.running_cost(&xd, u)? * tau)
    })
}

/// A discrete extremal: `N+1` states and costates, `N` controls.
#[derive(Debug, Clone, PartialEq)]
pub struct DmpSolution {
    pub geometry: Geometry,
    pub tau: f64,
    pub xs: Vec<Vector>,
    pub ps: Vec<Vector>,
    pub us: Vec<Vector>,
    pub multipliers: Option<(Vector, Vector)>,
    pub iterations: usize,
}

impl DmpSolution {
    pub fn n_steps(&self) -> usize {
        self.us.len()
    }

    /// `‖D₃H(x^d_k, p^d_k, u_k)‖_∞` per interval.
    pub fn stationarity_series(&self, ocp: &dyn ControlDynamics) -> Result<Vec<f64>> {
        let ham = ControlHamiltonian::new(ocp);
        (0..self.n_steps())
            .map(|k| {
                let (xd, pd) = self.geometry.nodes(&self.xs[k], &self.xs[k + 1], &self.ps[k], &self.ps[k + 1]);
                Ok(max_abs(&ham.d3(&xd, &pd, &self.us[k])?))
            })
            .collect()
    }

    pub fn max_stationarity(&self, ocp: &dyn ControlDynamics) -> Result<f64> {
        Ok(self.stationarity_series(ocp)?.into_iter().fold(0.0, f64::max))
    }

    pub fn residual(&self, ocp: &dyn ControlDynamics) -> Result<Vector> {
        dmp_residual(ocp, self.geometry, &self.xs, &self.ps, &self.us, self.tau)
    }

    pub fn cost(&self, ocp: &dyn ControlDynamics) -> Result<f64> {
        cost_of(ocp, self.geometry, &self.xs, &self.us, self.tau)
    }

    /// Columns `k, x…, p…, u…, stationarity`; the control columns of the
    /// final node are empty.
    pub fn to_csv(&self, ocp: &dyn ControlDynamics) -> Result<CsvTable> {
        let n = self.xs[0].len();
        let m = ocp.control_dim();
        let mut header = vec!["k".to_string()];
        header.extend(indexed_columns("x", n));
        header.extend(indexed_columns("p", n));
        header.extend(indexed_columns("u", m));
        header.push("stationarity".into());
        let stationarity = self.stationarity_series(ocp)?;
        let mut table = CsvTable::new(header);
        let fmt = crate::report::fmt_f64;
        for (k, (x, p)) in self.xs.iter().zip(&self.ps).enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(x.iter().map(|v| fmt(*v)));
            row.extend(p.iter().map(|v| fmt(*v)));
            match self.us.get(k).zip(stationarity.get(k)) {
                Some((u, s)) => {
                    row.extend(u.iter().map(|v| fmt(*v)));
                    row.push(fmt(*s));
                }
                None => row.extend(std::iter::repeat_n(String::new(), m + 1)),
            }
            table.push_row(row);
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmpSolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DmpSolveOptions {
    fn default() -> Self {
        Self { tol: 1e-11, max_iter: 50 }
    }
}

/// Index layout of the stacked unknown `[x_0..x_N, p_0..p_N, u_0..u_{N−1}, λ₀, λ_N]`.
struct Layout {
    n: usize,
    m: usize,
    steps: usize,
    r0: usize,
    rn: usize,
}

impl Layout {
    fn x(&self, k: usize) -> usize {
        k * self.n
    }
    fn p(&self, k: usize) -> usize {
        (self.steps + 1 + k) * self.n
    }
    fn u(&self, k: usize) -> usize {
        2 * (self.steps + 1) * self.n + k * self.m
    }
    fn lambda0(&self) -> usize {
        self.u(self.steps)
    }
    fn len(&self) -> usize {
        self.lambda0() + self.r0 + self.rn
    }

    fn pack(&self, sol: &DmpSolution) -> Vector {
        let mut w = Vector::zeros(self.len());
        for k in 0..=self.steps {
            w.rows_mut(self.x(k), self.n).copy_from(&sol.xs[k]);
            w.rows_mut(self.p(k), self.n).copy_from(&sol.ps[k]);
        }
        for k in 0..self.steps {
            w.rows_mut(self.u(k), self.m).copy_from(&sol.us[k]);
        }
        if let Some((l0, ln)) = &sol.multipliers {
            w.rows_mut(self.lambda0(), self.r0).copy_from(l0);
            w.rows_mut(self.lambda0() + self.r0, self.rn).copy_from(ln);
        }
        w
    }

    #[allow(clippy::type_complexity)]
    fn unpack(&self, w: &Vector) -> (Vec<Vector>, Vec<Vector>, Vec<Vector>, Vector, Vector) {
        let seg = |start: usize, len: usize| w.rows(start, len).into_owned();
        let xs = (0..=self.steps).map(|k| seg(self.x(k), self.n)).collect();
        let ps = (0..=self.steps).map(|k| seg(self.p(k), self.n)).collect();
        let us = (0..self.steps).map(|k| seg(self.u(k), self.m)).collect();
        (xs, ps, us, seg(self.lambda0(), self.r0), seg(self.lambda0() + self.r0, self.rn))
    }
}

/// Crude starting point: states interpolated between the endpoints (or
/// held at zero for constraint boundaries), zero costates and controls from
/// [`ControlDynamics::control_guess`].
pub fn crude_guess(ocp: &dyn ControlDynamics, geometry: Geometry, boundary: &Boundary, horizon: f64, n_steps: usize) -> DmpSolution {
    let n = ocp.state_dim();
    let tau = horizon / n_steps.max(1) as f64;
    let xs: Vec<Vector> = (0..=n_steps)
        .map(|k| match boundary {
            Boundary::HardEndpoints { initial, terminal } => {
                let s = if n_steps == 0 { 0.0 } else { k as f64 / n_steps as f64 };
                initial * (1.0 - s) + terminal * s
            }
            Boundary::Transversality { .. } => Vector::zeros(n),
        })
        .collect();
    let ps = vec![Vector::zeros(n); n_steps + 1];
    let us = (0..n_steps).map(|k| ocp.control_guess(&xs[k], &ps[k])).collect();
    let (r0, rn) = boundary.multiplier_counts();
    let multipliers = match boundary {
        Boundary::HardEndpoints { .. } => None,
        Boundary::Transversality { .. } => Some((Vector::zeros(r0), Vector::zeros(rn))),
    };
    DmpSolution { geometry, tau, xs, ps, us, multipliers, iterations: 0 }
}

/// Solves the full discrete necessary conditions with states, costates,
/// controls (and multipliers) as unknowns.
pub fn solve_dmp(
    ocp: &dyn ControlDynamics,
    geometry: Geometry,
    boundary: &Boundary,
    horizon: f64,
    n_steps: usize,
    guess: Option<&DmpSolution>,
    opts: DmpSolveOptions,
) -> Result<DmpSolution> {
    if !(horizon > 0.0) || n_steps == 0 {
        return Err(Error::invalid("horizon", "need T > 0 and N ≥ 1"));
    }
    let tau = horizon / n_steps as f64;
    let (r0, rn) = boundary.multiplier_counts();
    let layout = Layout { n: ocp.state_dim(), m: ocp.control_dim(), steps: n_steps, r0, rn };
    let start = match guess {
        Some(g) => g.clone(),
        None => crude_guess(ocp, geometry, boundary, horizon, n_steps),
    };
    check_sequences(layout.n, layout.m, &start.xs, &start.ps, &start.us)?;
    if start.us.len() != n_steps {
        return Err(Error::invalid("guess", "step count differs from N"));
    }
    let ham = ControlHamiltonian::new(ocp);
    let (n, m) = (layout.n, layout.m);
    let block = 2 * n + m;
    let has_multipliers = matches!(boundary, Boundary::Transversality { .. });

    let residual_of = |w: &Vector| -> Result<Vector> {
        let (xs, ps, us, l0, ln) = layout.unpack(w);
        let interior = dmp_residual(ocp, geometry, &xs, &ps, &us, tau)?;
        let ends = boundary_residual(boundary, &xs, &ps, has_multipliers.then_some((&l0, &ln)))?;
        let mut out = Vector::zeros(interior.len() + ends.len());
        out.rows_mut(0, interior.len()).copy_from(&interior);
        out.rows_mut(interior.len(), ends.len()).copy_from(&ends);
        Ok(out)
    };

    let step = |v: f64| fd_step(v, CONTROL_FD_STEP);
    let jacobian_of = |w: &Vector| -> Result<Matrix> {
        let mut jac = Matrix::zeros(layout.len(), layout.len());
        let (xs, ps, _, _, _) = layout.unpack(w);
        for k in 0..n_steps {
            // Local unknowns: x_k, x_{k+1}, p_k, p_{k+1}, u_k.
            let cols: Vec<usize> = [(layout.x(k), n), (layout.x(k + 1), n), (layout.p(k), n), (layout.p(k + 1), n), (layout.u(k), m)]
                .iter()
                .flat_map(|&(s, len)| s..s + len)
                .collect();
            let local = Vector::from_iterator(cols.len(), cols.iter().map(|&c| w[c]));
            let local_jac = fd_jacobian(
                |v| {
                    let part = |i: usize, len: usize| v.rows(i, len).into_owned();
                    let (a, b, c, d, e) = (part(0, n), part(n, n), part(2 * n, n), part(3 * n, n), part(4 * n, m));
                    interval_residual(&ham, geometry, tau, (&a, &b, &c, &d, &e))
                },
                &local,
                step,
            )?;
            for (j, &c) in cols.iter().enumerate() {
                for r in 0..block {
                    jac[(k * block + r, c)] = local_jac[(r, j)];
                }
            }
        }
        // Boundary rows touch only the endpoint states, costates and multipliers.
        let row0 = n_steps * block;
        let cols: Vec<usize> = [(layout.x(0), n), (layout.x(n_steps), n), (layout.p(0), n), (layout.p(n_steps), n), (layout.lambda0(), r0 + rn)]
            .iter()
            .flat_map(|&(s, len)| s..s + len)
            .collect();
        let local = Vector::from_iterator(cols.len(), cols.iter().map(|&c| w[c]));
        let local_jac = fd_jacobian(
            |v| {
                let mut xs_b = xs.clone();
                let mut ps_b = ps.clone();
                xs_b[0] = v.rows(0, n).into_owned();
                xs_b[n_steps] = v.rows(n, n).into_owned();
                ps_b[0] = v.rows(2 * n, n).into_owned();
                ps_b[n_steps] = v.rows(3 * n, n).into_owned();
                let l0_b = v.rows(4 * n, r0).into_owned();
                let ln_b = v.rows(4 * n + r0, rn).into_owned();
                boundary_residual(boundary, &xs_b, &ps_b, has_multipliers.then_some((&l0_b, &ln_b)))
            },
            &local,
            step,
        )?;
        for (j, &c) in cols.iter().enumerate() {
            for r in 0..local_jac.nrows() {
                jac[(row0 + r, c)] = local_jac[(r, j)];
            }
        }
        Ok(jac)
    };

    let newton = NewtonOptions { tol: opts.tol, max_iter: opts.max_iter, polish: 2 };
    let out = solve_newton(layout.pack(&start), newton, "discrete maximum principle", |w| Ok((residual_of(w)?, jacobian_of(w)?)))?;
    let (xs, ps, us, l0, ln) = layout.unpack(&out.x);
    Ok(DmpSolution {
        geometry,
        tau,
        xs,
        ps,
        us,
        multipliers: has_multipliers.then_some((l0, ln)),
        iterations: out.iterations,
    })
}

/// One step of the reduced flow in the given geometry, with its tangent.
fn reduced_step(sys: &dyn Hamiltonian, geometry: Geometry, z: &PhaseState, cfg: &StepperConfig) -> Result<(PhaseState, Matrix)> {
    match geometry {
        Geometry::Midpoint => {
            let next = midpoint_step(sys, z, cfg)?;
            let tangent = midpoint_tangent(sys, &z.to_vector(), &next.to_vector(), cfg.tau)?;
            Ok((next, tangent))
        }
        Geometry::Stormer => {
            let (next, _) = stormer_general_step(sys, z, cfg)?;
            let tangent = stormer_general_tangent(sys, &z.q, &next.p, cfg.tau)?;
            Ok((next, tangent))
        }
    }
}

/// Propagates `n_steps` reduced steps and returns the samples with the
/// accumulated tangent map.
fn propagate_reduced(
    sys: &dyn Hamiltonian,
    geometry: Geometry,
    start: &PhaseState,
    n_steps: usize,
    cfg: &StepperConfig,
) -> Result<(Vec<PhaseState>, Matrix)> {
    let dim = 2 * sys.dof();
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(start.clone());
    let mut phi = Matrix::identity(dim, dim);
    for k in 0..n_steps {
        let (next, tangent) = reduced_step(sys, geometry, &states[k], cfg).map_err(|e| e.at_step(k + 1))?;
        phi = tangent * phi;
        states.push(next);
    }
    Ok((states, phi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Number of shooting segments; 1 is single shooting.
    pub segments: usize,
    pub newton_tol: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_SHOOT_TOL, max_iter: 50, segments: 1, newton_tol: 1e-13 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShootingReport {
    pub iterations: usize,
    /// `‖x_N − x_T‖_∞` (plus continuity defects with several segments).
    pub residual: f64,
    pub history: Vec<f64>,
    pub p0: Vector,
}

/// Sensitivity matrices with conditioning above this are treated as singular.
const SENSITIVITY_CONDITION_LIMIT: f64 = 1e13;

/// Shooting on `p₀ ↦ x_N(p₀) − x_T` for the reduced flow.
///
/// The sensitivity is the product of the exact one-step tangents. Newton
/// steps are backtracked until the residual decreases.
#[allow(clippy::too_many_arguments)]
pub fn shoot(
    ocp: &dyn ControlDynamics,
    geometry: Geometry,
    x0: &Vector,
    x_target: &Vector,
    horizon: f64,
    n_steps: usize,
    p0_guess: &Vector,
    opts: &ShootingOptions,
) -> Result<(DmpSolution, ShootingReport)> {
    let n = ocp.state_dim();
    ensure_len(x0, n)?;
    ensure_len(x_target, n)?;
    ensure_len(p0_guess, n)?;
    if !(horizon > 0.0) || n_steps == 0 {
        return Err(Error::invalid("horizon", "need T > 0 and N ≥ 1"));
    }
    if opts.segments == 0 || opts.segments > n_steps {
        return Err(Error::invalid("segments", format!("must lie in 1..={n_steps}")));
    }
    let sys = eliminate_control(ocp);
    let tau = horizon / n_steps as f64;
    let cfg = StepperConfig { tau, newton_tol: opts.newton_tol, ..StepperConfig::new(tau) };
    let segs = opts.segments;
    let bounds: Vec<usize> = (0..=segs).map(|j| (j * n_steps + segs / 2) / segs).collect();

    // Unknowns: p₀, then (x_j, p_j) at the start of segments 1..S.
    let unknown_len = n + 2 * n * (segs - 1);
    let starts_of = |w: &Vector| -> Result<Vec<PhaseState>> {
        let mut starts = vec![PhaseState::new(x0.clone(), w.rows(0, n).into_owned())?];
        for j in 1..segs {
            let base = n + 2 * n * (j - 1);
            starts.push(PhaseState::new(w.rows(base, n).into_owned(), w.rows(base + n, n).into_owned())?);
        }
        Ok(starts)
    };
    #[allow(clippy::type_complexity)]
    let evaluate = |w: &Vector| -> Result<(Vector, Matrix, Vec<PhaseState>)> {
        let starts = starts_of(w)?;
        let mut residual = Vector::zeros(unknown_len);
        let mut jac = Matrix::zeros(unknown_len, unknown_len);
        let mut samples = vec![starts[0].clone()];
        for j in 0..segs {
            let (states, phi) = propagate_reduced(&*sys, geometry, &starts[j], bounds[j + 1] - bounds[j], &cfg)
                .map_err(|e| match e {
                    Error::StepFailed { step, source } => Error::StepFailed { step: step + bounds[j], source },
                    other => other,
                })?;
            let end = states.last().expect("segment holds its start").to_vector();
            samples.extend(states.into_iter().skip(1));
            // Columns of this segment's start unknowns.
            let (col, phi_cols) = if j == 0 { (0, phi.columns(n, n).into_owned()) } else { (n + 2 * n * (j - 1), phi.clone()) };
            if j + 1 < segs {
                let row = 2 * n * j;
                let next = starts[j + 1].to_vector();
                residual.rows_mut(row, 2 * n).copy_from(&(&end - &next));
                jac.view_mut((row, col), (2 * n, phi_cols.ncols())).copy_from(&phi_cols);
                let next_col = n + 2 * n * j;
                for i in 0..2 * n {
                    jac[(row + i, next_col + i)] = -1.0;
                }
            } else {
                let row = 2 * n * j;
                residual.rows_mut(row, n).copy_from(&(end.rows(0, n) - x_target));
                jac.view_mut((row, col), (n, phi_cols.ncols())).copy_from(&phi_cols.rows(0, n));
            }
        }
        Ok((residual, jac, samples))
    };

    let mut w = Vector::zeros(unknown_len);
    w.rows_mut(0, n).copy_from(p0_guess);
    // Seed interior segment starts from a single sweep with the guess.
    if segs > 1 {
        let start = PhaseState::new(x0.clone(), p0_guess.clone())?;
        let (states, _) = propagate_reduced(&*sys, geometry, &start, n_steps, &cfg)?;
        for j in 1..segs {
            let base = n + 2 * n * (j - 1);
            w.rows_mut(base, 2 * n).copy_from(&states[bounds[j]].to_vector());
        }
    }

    let (mut residual, mut jac, mut samples) = evaluate(&w)?;
    let mut history = vec![max_abs(&residual)];
    let mut iterations = 0;
    let mut polished = false;
    loop {
        let current = max_abs(&residual);
        let converged = current <= opts.tol;
        if converged && (polished || current == 0.0) {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::ShootingDiverged { iterations, residual: current });
        }
        let singular = || Error::SingularSensitivity { residual: current };
        let inv = inverse(&jac, "shooting sensitivity").map_err(|_| singular())?;
        if !(inf_norm(&jac) * inf_norm(&inv) <= SENSITIVITY_CONDITION_LIMIT) {
            return Err(singular());
        }
        let delta = solve(&jac, &residual, "shooting sensitivity").map_err(|_| singular())?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &w - &delta * alpha;
            if let Ok(eval) = evaluate(&trial) {
                if max_abs(&eval.0) < current || (converged && max_abs(&eval.0) <= current) {
                    accepted = Some((trial, eval));
                    break;
                }
            }
            if converged {
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, eval)) => {
                w = trial;
                (residual, jac, samples) = eval;
                history.push(max_abs(&residual));
                if !converged {
                    iterations += 1;
                }
            }
            None if converged => {}
            None => return Err(Error::ShootingDiverged { iterations, residual: current }),
        }
        if converged {
            polished = true;
        }
    }

    let xs: Vec<Vector> = samples.iter().map(|s| s.q.clone()).collect();
    let ps: Vec<Vector> = samples.iter().map(|s| s.p.clone()).collect();
    let newton = NewtonOptions { tol: 1e-13, max_iter: 50, polish: 1 };
    let us = (0..n_steps)
        .map(|k| {
            let (xd, pd) = geometry.nodes(&xs[k], &xs[k + 1], &ps[k], &ps[k + 1]);
            optimal_control(ocp, &xd, &pd, newton)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = ShootingReport { iterations, residual: max_abs(&residual), history, p0: w.rows(0, n).into_owned() };
    Ok((DmpSolution { geometry, tau, xs, ps, us, multipliers: None, iterations }, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagramReport {
    pub state_discrepancy: f64,
    pub costate_discrepancy: f64,
    pub control_discrepancy: f64,
    /// Eliminate, then discretize: shooting on the reduced flow.
    pub reduced_route: DmpSolution,
    /// Discretize, then eliminate: the full discrete conditions.
    pub full_route: DmpSolution,
}

impl DiagramReport {
    pub fn max_discrepancy(&self) -> f64 {
        self.state_discrepancy.max(self.costate_discrepancy)
    }
}

fn max_pointwise(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(u, v)| max_abs(&(u - v))).fold(0.0, f64::max)
}

/// Solves a hard-endpoint instance by both routes and compares them node
/// by node.
#[allow(clippy::too_many_arguments)]
pub fn verify_commutative_diagram(
    ocp: &dyn ControlDynamics,
    geometry: Geometry,
    x0: &Vector,
    x_target: &Vector,
    horizon: f64,
    n_steps: usize,
    p0_guess: &Vector,
    opts: &ShootingOptions,
) -> Result<DiagramReport> {
    let (reduced_route, _) = shoot(ocp, geometry, x0, x_target, horizon, n_steps, p0_guess, opts)?;
    let boundary = Boundary::HardEndpoints { initial: x0.clone(), terminal: x_target.clone() };
    let full_route = solve_dmp(ocp, geometry, &boundary, horizon, n_steps, None, DmpSolveOptions::default())?;
    Ok(DiagramReport {
        state_discrepancy: max_pointwise(&reduced_route.xs, &full_route.xs),
        costate_discrepancy: max_pointwise(&reduced_route.ps, &full_route.ps),
        control_discrepancy: max_pointwise(&reduced_route.us, &full_route.us),
        reduced_route,
        full_route,
    })
}

/// One step `(x_k, p_k) ↦ (x_{k+1}, p_{k+1})` of the full discrete
/// conditions, solving for the control alongside.
pub struct DmpStepMap<'a> {
    pub ocp: &'a dyn ControlDynamics,
    pub geometry: Geometry,
    pub tau: f64,
}

impl DmpStepMap<'_> {
    pub fn step(&self, z: &Vector) -> Result<(Vector, Vector)> {
        let (n, m) = (self.ocp.state_dim(), self.ocp.control_dim());
        ensure_len(z, 2 * n)?;
        let (x0, p0) = split(z);
        let ham = ControlHamiltonian::new(self.ocp);
        let tau = self.tau;
        // Unknowns (x1, p1, u); rows scaled by τ so the tolerance is on increments.
        let residual = |w: &Vector| -> Result<Vector> {
            let x1 = w.rows(0, n).into_owned();
            let p1 = w.rows(n, n).into_owned();
            let u = w.rows(2 * n, m).into_owned();
            Ok(interval_residual(&ham, self.geometry, tau, (&x0, &x1, &p0, &p1, &u))? * tau)
        };
        let mut start = Vector::zeros(2 * n + m);
        start.rows_mut(0, n).copy_from(&x0);
        start.rows_mut(n, n).copy_from(&p0);
        start.rows_mut(2 * n, m).copy_from(&optimal_control(
            self.ocp,
            &x0,
            &p0,
            NewtonOptions { tol: 1e-13, max_iter: 50, polish: 1 },
        )
        .unwrap_or_else(|_| self.ocp.control_guess(&x0, &p0)));
        let opts = NewtonOptions { tol: 1e-14, max_iter: 50, polish: 2 };
        let out = solve_newton(start, opts, "discrete maximum principle step", |w| {
            Ok((residual(w)?, fd_jacobian(residual, w, |v| fd_step(v, CONTROL_FD_STEP))?))
        })?;
        Ok((out.x.rows(0, 2 * n).into_owned(), out.x.rows(2 * n, m).into_owned()))
    }
}

impl crate::integrators::OneStepMap for DmpStepMap<'_> {
    fn dim(&self) -> usize {
        2 * self.ocp.state_dim()
    }
    fn apply(&self, z: &Vector) -> Result<Vector> {
        self.step(z).map(|(z1, _)| z1)
    }
}

/// States produced by a control sequence from `x0` in the given geometry.
/// The midpoint state update is implicit and solved by Newton.
pub fn simulate_controls(ocp: &dyn ControlDynamics, geometry: Geometry, x0: &Vector, us: &[Vector], tau: f64) -> Result<Vec<Vector>> {
    let n = ocp.state_dim();
    ensure_len(x0, n)?;
    let mut xs = vec![x0.clone()];
    for (k, u) in us.iter().enumerate() {
        let x = &xs[k];
        let next = match geometry {
            Geometry::Stormer => x + ocp.dynamics(x, u)? * tau,
            Geometry::Midpoint => {
                let predictor = x + ocp.dynamics(x, u)? * tau;
                let opts = NewtonOptions { tol: 1e-14, max_iter: 50, polish: 1 };
                solve_newton(predictor, opts, "controlled midpoint step", |x1| {
                    let mid = (x + x1) * 0.5;
                    let (fx, _) = ocp.dynamics_jacobians(&mid, u)?;
                    let r = x1 - x - ocp.dynamics(&mid, u)? * tau;
                    Ok((r, Matrix::identity(n, n) - fx * (0.5 * tau)))
                })
                .map_err(|e| e.at_step(k + 1))?
                .x
            }
        };
        xs.push(next);
    }
    Ok(xs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationOptions {
    pub count: usize,
    /// Half-width of the uniform per-entry control perturbation.
    pub amplitude: f64,
    pub seed: u64,
    /// Terminal accuracy required of a restored perturbation.
    pub feasibility_tol: f64,
}

impl Default for PerturbationOptions {
    fn default() -> Self {
        Self { count: 200, amplitude: 1e-2, seed: 7, feasibility_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    pub base_cost: f64,
    /// Costs of the feasible perturbed controls.
    pub costs: Vec<f64>,
    /// Perturbations for which feasibility could not be restored.
    pub infeasible: usize,
    pub max_terminal_error: f64,
}

impl PerturbationReport {
    /// Smallest `cost(perturbed) − cost(solution)`.
    pub fn min_margin(&self) -> f64 {
        self.costs.iter().map(|c| c - self.base_cost).fold(f64::INFINITY, f64::min)
    }

    /// Number of feasible perturbations that did not beat the solution.
    pub fn not_better_count(&self) -> usize {
        self.costs.iter().filter(|&&c| c >= self.base_cost).count()
    }
}

/// Smooth correction directions: constant, `cos` and `sin` of one and two
/// half-periods per control component.
fn correction_basis(m: usize, geometry: Geometry, n_steps: usize, tau: f64) -> Vec<Vec<Vector>> {
    let horizon = n_steps as f64 * tau;
    let shapes: [&dyn Fn(f64) -> f64; 5] = [
        &|_| 1.0,
        &|s| (std::f64::consts::PI * s).cos(),
        &|s| (std::f64::consts::PI * s).sin(),
        &|s| (2.0 * std::f64::consts::PI * s).cos(),
        &|s| (2.0 * std::f64::consts::PI * s).sin(),
    ];
    let mut basis = Vec::new();
    for c in 0..m {
        for shape in shapes {
            basis.push(
                (0..n_steps)
                    .map(|k| {
                        let mut v = Vector::zeros(m);
                        v[c] = shape(geometry.control_time(k, tau) / horizon);
                        v
                    })
                    .collect(),
            );
        }
    }
    basis
}

/// Compares the cost of `solution` against random control perturbations
/// made feasible again by a minimum-norm correction in a smooth subspace.
pub fn perturbation_check(
    ocp: &dyn ControlDynamics,
    solution: &DmpSolution,
    x_target: &Vector,
    opts: &PerturbationOptions,
) -> Result<PerturbationReport> {
    let (m, steps, tau, geometry) = (ocp.control_dim(), solution.n_steps(), solution.tau, solution.geometry);
    let x0 = &solution.xs[0];
    let base_cost = solution.cost(ocp)?;
    let basis = correction_basis(m, geometry, steps, tau);
    let combine = |us: &[Vector], coeffs: &Vector| -> Vec<Vector> {
        us.iter()
            .enumerate()
            .map(|(k, u)| basis.iter().zip(coeffs.iter()).fold(u.clone(), |acc, (b, c)| acc + &b[k] * *c))
            .collect()
    };
    let terminal = |us: &[Vector]| -> Result<Vector> {
        Ok(simulate_controls(ocp, geometry, x0, us, tau)?.pop().expect("non-empty") - x_target)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = PerturbationReport { base_cost, costs: Vec::new(), infeasible: 0, max_terminal_error: 0.0 };
    for _ in 0..opts.count {
        let perturbed: Vec<Vector> = solution
            .us
            .iter()
            .map(|u| u.map(|v| v + rng.random_range(-opts.amplitude..=opts.amplitude)))
            .collect();
        let mut coeffs = Vector::zeros(basis.len());
        let mut restored = None;
        for _ in 0..30 {
            let candidate = combine(&perturbed, &coeffs);
            let err = match terminal(&candidate) {
                Ok(e) => e,
                Err(_) => break,
            };
            if max_abs(&err) <= opts.feasibility_tol {
                restored = Some((candidate, max_abs(&err)));
                break;
            }
            let jac = match fd_jacobian(|c| terminal(&combine(&perturbed, c)), &coeffs, |v| fd_step(v, CONTROL_FD_STEP)) {
                Ok(j) => j,
                Err(_) => break,
            };
            // Minimum-norm Gauss–Newton step.
            let gram = &jac * jac.transpose();
            match solve(&gram, &err, "feasibility restoration") {
                Ok(y) => coeffs -= jac.transpose() * y,
                Err(_) => break,
            }
        }
        match restored {
            Some((controls, err)) => {
                let xs = simulate_controls(ocp, geometry, x0, &controls, tau)?;
                report.costs.push(cost_of(ocp, geometry, &xs, &controls, tau)?);
                report.max_terminal_error = report.max_terminal_error.max(err);
            }
            None => report.infeasible += 1,
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{max_defect, sample_probes, symplectic_defect};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    /// Hides the closed-form elimination so the Newton path is exercised.
    struct Opaque<P>(P);

    impl<P: ControlDynamics> ControlDynamics for Opaque<P> {
        fn state_dim(&self) -> usize {
            self.0.state_dim()
        }
        fn control_dim(&self) -> usize {
            self.0.control_dim()
        }
        fn dynamics(&self, x: &Vector, u: &Vector) -> Result<Vector> {
            self.0.dynamics(x, u)
        }
        fn running_cost(&self, x: &Vector, u: &Vector) -> Result<f64> {
            self.0.running_cost(x, u)
        }
    }

    /// `ẋ = −x`, `g = ½x²`, no control.
    struct Autonomous;

    impl ControlDynamics for Autonomous {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            0
        }
        fn dynamics(&self, x: &Vector, _u: &Vector) -> Result<Vector> {
            Ok(-x)
        }
        fn running_cost(&self, x: &Vector, _u: &Vector) -> Result<f64> {
            Ok(0.5 * x.norm_squared())
        }
    }

    fn straight_line(geometry: Geometry, steps: usize) -> DmpSolution {
        let tau = 1.0 / steps as f64;
        DmpSolution {
            geometry,
            tau,
            xs: (0..=steps).map(|k| v(&[k as f64 * tau])).collect(),
            ps: vec![v(&[-1.0]); steps + 1],
            us: vec![v(&[1.0]); steps],
            multipliers: None,
            iterations: 0,
        }
    }

    #[test]
    fn partials_match_differences() {
        let ham = ControlHamiltonian::new(&HeisenbergProblem);
        let (x, p, u) = (v(&[0.3, -0.7, 0.2]), v(&[0.5, 0.1, -0.4]), v(&[0.9, -0.2]));
        let fd_u = crate::linalg::fd_gradient(|uv| ham.value(&x, &p, uv), &u, 1e-6).unwrap();
        assert!((ham.d3(&x, &p, &u).unwrap() - fd_u).amax() <= 1e-9);
        let fd_x = crate::linalg::fd_gradient(|xv| ham.value(xv, &p, &u), &x, 1e-6).unwrap();
        assert!((ham.d1(&x, &p, &u).unwrap() - fd_x).amax() <= 1e-9);
        let opaque = Opaque(HeisenbergProblem);
        let generic = ControlHamiltonian::new(&opaque);
        assert!((generic.d1(&x, &p, &u).unwrap() - ham.d1(&x, &p, &u).unwrap()).amax() <= 1e-9);
    }

    #[test]
    fn linear_quadratic_oracle_zeroes_residual() {
        for geometry in [Geometry::Stormer, Geometry::Midpoint] {
            let sol = straight_line(geometry, 10);
            assert!(sol.residual(&IntegratorPlant { dim: 1 }).unwrap().amax() <= 1e-12);
        }
    }

    #[test]
    fn empty_horizon_has_empty_residual() {
        let r = dmp_residual(&IntegratorPlant { dim: 2 }, Geometry::Stormer, &[v(&[0.0, 0.0])], &[v(&[0.0, 0.0])], &[], 0.1)
            .unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn cost_examples() {
        let plant = IntegratorPlant { dim: 1 };
        let xs = vec![v(&[0.0]); 11];
        assert_eq!(cost_of(&plant, Geometry::Stormer, &xs, &vec![v(&[0.0]); 10], 0.1).unwrap(), 0.0);
        assert_abs_diff_eq!(cost_of(&plant, Geometry::Midpoint, &xs, &vec![v(&[1.0]); 10], 0.1).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn elimination_examples() {
        let plant = IntegratorPlant { dim: 2 };
        let reduced = eliminate_control(&plant);
        let z = v(&[0.3, 0.4, 1.5, -2.0]);
        assert_abs_diff_eq!(reduced.energy(&z).unwrap(), -0.5 * (1.5f64.powi(2) + 4.0), epsilon = 1e-15);

        let heis = HeisenbergProblem;
        let registered = eliminate_control(&heis);
        let generic = ReducedHamiltonian::new(&heis);
        let newton = Opaque(HeisenbergProblem);
        let newton_reduced = ReducedHamiltonian::new(&newton);
        for z in [v(&[3.0, 4.0, 0.0, 0.2, -0.1, 0.5]), v(&[0.1, -0.3, 2.0, 1.0, 0.7, -0.4])] {
            let reference = make_heisenberg_reduced().energy(&z).unwrap();
            assert_abs_diff_eq!(registered.energy(&z).unwrap(), reference, epsilon = 1e-14);
            assert_abs_diff_eq!(generic.energy(&z).unwrap(), reference, epsilon = 1e-14);
            assert_abs_diff_eq!(newton_reduced.energy(&z).unwrap(), reference, epsilon = 1e-9);
            let g_ref = make_heisenberg_reduced().gradient(&z).unwrap();
            assert!((generic.gradient(&z).unwrap() - g_ref).amax() <= 1e-14);
        }

        let free = eliminate_control(&Autonomous);
        let z = v(&[0.8, 0.3]);
        assert_abs_diff_eq!(free.energy(&z).unwrap(), 0.5 * 0.64 + 0.3 * -0.8, epsilon = 1e-15);
    }

    /// The closed form printed for the Heisenberg reduced Hamiltonian drops
    /// `−½ p_z² (x² + y²)`; it agrees with the true reduction only where
    /// that term vanishes.
    #[test]
    fn printed_reduction_drops_quadratic_term() {
        let printed = |z: &Vector| {
            let (x, y, px, py, pz) = (z[0], z[1], z[3], z[4], z[5]);
            -0.5 * (px * px + py * py) - px * pz * y + py * pz * x
        };
        let reduced = make_heisenberg_reduced();
        let agree = v(&[0.0, 0.0, 1.0, 0.3, -0.2, 0.9]);
        assert_abs_diff_eq!(printed(&agree), reduced.energy(&agree).unwrap(), epsilon = 1e-15);
        let differ = v(&[3.0, 4.0, 0.0, 0.2, -0.1, 0.5]);
        let gap = printed(&differ) - reduced.energy(&differ).unwrap();
        assert_abs_diff_eq!(gap, 0.5 * 0.25 * 25.0, epsilon = 1e-13);
    }

    #[test]
    fn plant_shooting_matches_oracle() {
        let plant = IntegratorPlant { dim: 1 };
        for geometry in [Geometry::Stormer, Geometry::Midpoint] {
            let (sol, report) =
                shoot(&plant, geometry, &v(&[0.0]), &v(&[1.0]), 1.0, 20, &v(&[0.0]), &ShootingOptions::default()).unwrap();
            assert!(report.iterations <= 3);
            assert_abs_diff_eq!(report.p0[0], -1.0, epsilon = 1e-10);
            assert!(sol.residual(&plant).unwrap().amax() <= 1e-12);
        }
    }

    #[test]
    fn free_endpoint_target_needs_no_correction() {
        let plant = IntegratorPlant { dim: 1 };
        let (_, report) =
            shoot(&plant, Geometry::Midpoint, &v(&[0.5]), &v(&[0.5]), 1.0, 10, &v(&[0.0]), &ShootingOptions::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.p0[0], 0.0);
    }

    #[test]
    fn heisenberg_shooting_straight_line() {
        let heis = HeisenbergProblem;
        let opts = ShootingOptions::default();
        let (sol, report) =
            shoot(&heis, Geometry::Midpoint, &v(&[0.0; 3]), &v(&[1.0, 0.0, 0.0]), 1.0, 100, &v(&[-0.5, 0.1, 0.2]), &opts).unwrap();
        assert!(report.residual <= 1e-10);
        assert!((report.p0.clone() - v(&[-1.0, 0.0, 0.0])).amax() <= 1e-9);
        assert!(sol.residual(&heis).unwrap().amax() <= 1e-10);
        assert!(sol.max_stationarity(&heis).unwrap() <= 1e-10);
        assert_abs_diff_eq!(sol.cost(&heis).unwrap(), 0.5, epsilon = 1e-9);
        for x in &sol.xs {
            assert!(x[1].abs() <= 1e-9 && x[2].abs() <= 1e-9);
        }
    }

    #[test]
    fn heisenberg_zero_costate_is_singular() {
        let err = shoot(
            &HeisenbergProblem,
            Geometry::Midpoint,
            &v(&[0.0; 3]),
            &v(&[1.0, 0.0, 0.0]),
            1.0,
            20,
            &v(&[0.0; 3]),
            &ShootingOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularSensitivity { .. }), "{err}");
    }

    #[test]
    fn multiple_shooting_agrees_with_single() {
        let heis = HeisenbergProblem;
        let target = v(&[0.6, -0.3, 0.1]);
        let guess = v(&[-0.6, 0.3, 0.5]);
        let single = shoot(&heis, Geometry::Stormer, &v(&[0.0; 3]), &target, 1.0, 40, &guess, &ShootingOptions::default());
        let multi = shoot(
            &heis,
            Geometry::Stormer,
            &v(&[0.0; 3]),
            &target,
            1.0,
            40,
            &guess,
            &ShootingOptions { segments: 4, ..ShootingOptions::default() },
        );
        let (a, _) = single.unwrap();
        let (b, rb) = multi.unwrap();
        assert!(rb.residual <= 1e-10);
        assert!(max_pointwise(&a.xs, &b.xs) <= 1e-9);
        assert!(a.residual(&heis).unwrap().amax() <= 1e-9);
    }

    #[test]
    fn commutative_diagram_plant_and_heisenberg() {
        let plant = IntegratorPlant { dim: 2 };
        for geometry in [Geometry::Stormer, Geometry::Midpoint] {
            let report = verify_commutative_diagram(
                &plant,
                geometry,
                &v(&[0.0, 1.0]),
                &v(&[1.0, -1.0]),
                1.0,
                10,
                &v(&[0.0, 0.0]),
                &ShootingOptions::default(),
            )
            .unwrap();
            assert!(report.max_discrepancy() <= 1e-12, "{}", report.max_discrepancy());
            let single = verify_commutative_diagram(
                &plant,
                geometry,
                &v(&[0.0, 1.0]),
                &v(&[1.0, -1.0]),
                1.0,
                1,
                &v(&[0.0, 0.0]),
                &ShootingOptions::default(),
            )
            .unwrap();
            assert!(single.max_discrepancy() <= 1e-13);
        }
        let heis = verify_commutative_diagram(
            &HeisenbergProblem,
            Geometry::Midpoint,
            &v(&[0.0; 3]),
            &v(&[1.0, 0.0, 0.0]),
            1.0,
            100,
            &v(&[-0.5, 0.1, 0.2]),
            &ShootingOptions::default(),
        )
        .unwrap();
        assert!(heis.max_discrepancy() <= 1e-10, "{}", heis.max_discrepancy());
    }

    #[test]
    fn transversality_recovers_multipliers() {
        let plant = IntegratorPlant { dim: 1 };
        let boundary = Boundary::Transversality {
            initial: BoundaryConstraint::fixed(v(&[0.0])),
            terminal: BoundaryConstraint::fixed(v(&[1.0])),
        };
        for geometry in [Geometry::Stormer, Geometry::Midpoint] {
            let sol = solve_dmp(&plant, geometry, &boundary, 1.0, 8, None, DmpSolveOptions::default()).unwrap();
            let (l0, ln) = sol.multipliers.clone().unwrap();
            assert_abs_diff_eq!(sol.ps[0][0], -l0[0], epsilon = 1e-11);
            assert_abs_diff_eq!(sol.ps[8][0], ln[0], epsilon = 1e-11);
            assert_abs_diff_eq!(sol.xs[8][0], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sol.ps[0][0], -1.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn dmp_step_maps_are_symplectic() {
        let heis = HeisenbergProblem;
        let center = v(&[0.5, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let probes = sample_probes(&center, &Vector::from_element(6, 0.3), 10, 3);
        for geometry in [Geometry::Stormer, Geometry::Midpoint] {
            let map = DmpStepMap { ocp: &heis, geometry, tau: 0.01 };
            let defect = max_defect(&symplectic_defect(&map, &probes).unwrap());
            assert!(defect <= 1e-9, "{geometry}: {defect}");
        }
    }

    #[test]
    fn perturbations_do_not_lower_cost() {
        let heis = HeisenbergProblem;
        let target = v(&[1.0, 0.0, 0.0]);
        let (sol, _) =
            shoot(&heis, Geometry::Midpoint, &v(&[0.0; 3]), &target, 1.0, 40, &v(&[-0.5, 0.1, 0.2]), &ShootingOptions::default())
                .unwrap();
        let opts = PerturbationOptions { count: 20, ..PerturbationOptions::default() };
        let report = perturbation_check(&heis, &sol, &target, &opts).unwrap();
        assert_eq!(report.infeasible, 0);
        assert_eq!(report.not_better_count(), 20);
        assert!(report.min_margin() > 0.0);
    }

    #[test]
    fn solution_csv_layout() {
        let sol = straight_line(Geometry::Midpoint, 4);
        let table = sol.to_csv(&IntegratorPlant { dim: 1 }).unwrap();
        assert_eq!(table.header(), &["k", "x", "p", "u", "stationarity"]);
        assert_eq!(table.len(), 5);
        assert_eq!(table.rows()[4][3], "");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn plant_endpoints_reached(a in -2.0f64..2.0, b in -2.0f64..2.0, steps in 1usize..30) {
            let plant = IntegratorPlant { dim: 1 };
            let (sol, report) = shoot(&plant, Geometry::Midpoint, &v(&[a]), &v(&[b]), 1.5, steps, &v(&[0.3]), &ShootingOptions::default()).unwrap();
            prop_assert!(report.residual <= 1e-10);
            prop_assert!((report.p0[0] + (b - a) / 1.5).abs() <= 1e-10);
            prop_assert!(sol.max_stationarity(&plant).unwrap() <= 1e-12);
        }
    }
}
