//! Fixed-step one-step maps and the trajectory driver.
//!
//! Separable schemes (Störmer, Verlet, Newmark) need `H = ½pᵀM⁻¹p + V(q)`;
//! implicit midpoint and RK4 accept any [`Hamiltonian`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{apply_j, ensure_finite, ensure_len, inverse, split, stack};
use crate::newton::{solve_newton, NewtonOptions};
use crate::report::{fmt_f64, indexed_columns, CsvTable};
use crate::systems::{Hamiltonian, PhaseState, SeparableSystem};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperConfig {
    pub tau: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl StepperConfig {
    pub fn new(tau: f64) -> Self {
        Self { tau, newton_tol: 1e-12, newton_max_iter: 50 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::invalid("newton_tol", "must be positive"));
        }
        Ok(())
    }

    pub(crate) fn newton(&self) -> NewtonOptions {
        NewtonOptions { tol: self.newton_tol, max_iter: self.newton_max_iter, polish: 1 }
    }
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self::new(0.01)
    }
}

/// Per-sample bookkeeping; the entry for sample 0 is all zeros.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMeta {
    pub newton_iters: usize,
    pub residual: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Two-step position recurrence; momenta reported as `M(q_k − q_{k−1})/τ`.
    Stormer,
    StormerHamiltonian,
    Verlet,
    /// Newmark with `γ = ½`; the state momentum is `M q̇`.
    Newmark { beta: f64 },
    Midpoint,
    Rk4,
}

impl Scheme {
    pub const KEYS: [&'static str; 6] = ["stormer", "stormer-h", "verlet", "newmark", "midpoint", "rk4"];
    pub const DEFAULT_NEWMARK_BETA: f64 = 0.25;

    pub fn key(&self) -> &'static str {
        match self {
            Scheme::Stormer => "stormer",
            Scheme::StormerHamiltonian => "stormer-h",
            Scheme::Verlet => "verlet",
            Scheme::Newmark { .. } => "newmark",
            Scheme::Midpoint => "midpoint",
            Scheme::Rk4 => "rk4",
        }
    }

    pub fn requires_separable(&self) -> bool {
        !matches!(self, Scheme::Midpoint | Scheme::Rk4)
    }

    pub fn is_symplectic(&self) -> bool {
        !matches!(self, Scheme::Rk4)
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stormer" => Scheme::Stormer,
            "stormer-h" => Scheme::StormerHamiltonian,
            "verlet" => Scheme::Verlet,
            "newmark" => Scheme::Newmark { beta: Self::DEFAULT_NEWMARK_BETA },
            "midpoint" => Scheme::Midpoint,
            "rk4" => Scheme::Rk4,
            other => {
                return Err(Error::UnknownKey { key: other.to_string(), valid: Self::KEYS.join(", ") });
            }
        })
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Newmark { beta } => write!(f, "newmark(beta={beta})"),
            other => f.write_str(other.key()),
        }
    }
}

fn separable<'a>(sys: &'a dyn Hamiltonian, scheme: &str) -> Result<&'a SeparableSystem> {
    sys.as_separable().ok_or_else(|| Error::RequiresSeparable(scheme.to_string()))
}

fn check_state(state: &PhaseState, n: usize) -> Result<()> {
    ensure_len(&state.q, n)?;
    ensure_len(&state.p, n)
}

fn finite_state(q: Vector, p: Vector) -> Result<PhaseState> {
    ensure_finite(&q, "q")?;
    ensure_finite(&p, "p")?;
    Ok(PhaseState { q, p })
}

/// `q_{k+1} = 2q_k − q_{k−1} − τ²M⁻¹∇V(q_k)`.
pub fn stormer_step(sys: &SeparableSystem, q_prev: &Vector, q_curr: &Vector, cfg: &StepperConfig) -> Result<Vector> {
    ensure_len(q_prev, sys.dof())?;
    let accel = sys.acceleration(q_curr)?;
    let next = q_curr * 2.0 - q_prev + accel * (cfg.tau * cfg.tau);
    ensure_finite(&next, "q")?;
    Ok(next)
}

/// Kick then drift: `p' = p − τ∇V(q)`, `q' = q + τM⁻¹p'`.
pub fn stormer_hamiltonian_step(sys: &SeparableSystem, state: &PhaseState, cfg: &StepperConfig) -> Result<PhaseState> {
    check_state(state, sys.dof())?;
    let p_next = &state.p - sys.potential_gradient(&state.q)? * cfg.tau;
    let q_next = &state.q + sys.velocity(&p_next) * cfg.tau;
    finite_state(q_next, p_next)
}

/// Kick-drift-kick velocity Verlet.
pub fn velocity_verlet_step(sys: &SeparableSystem, state: &PhaseState, cfg: &StepperConfig) -> Result<PhaseState> {
    check_state(state, sys.dof())?;
    let half = 0.5 * cfg.tau;
    let p_half = &state.p - sys.potential_gradient(&state.q)? * half;
    let q_next = &state.q + sys.velocity(&p_half) * cfg.tau;
    let p_next = p_half - sys.potential_gradient(&q_next)? * half;
    finite_state(q_next, p_next)
}

/// Position and velocity carried by the Newmark scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct NewmarkState {
    pub q: Vector,
    pub velocity: Vector,
}

impl NewmarkState {
    pub fn from_phase(sys: &SeparableSystem, state: &PhaseState) -> Self {
        Self { q: state.q.clone(), velocity: sys.velocity(&state.p) }
    }

    pub fn to_phase(&self, sys: &SeparableSystem) -> PhaseState {
        PhaseState { q: self.q.clone(), p: sys.mass() * &self.velocity }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=0.5).contains(&beta) {
        Ok(())
    } else {
        Err(Error::invalid("beta", format!("must lie in [0, 1/2], got {beta}")))
    }
}

/// Newmark step with `γ = ½`; Newton on `q_{k+1}`.
pub fn newmark_step(
    sys: &SeparableSystem,
    state: &NewmarkState,
    beta: f64,
    cfg: &StepperConfig,
) -> Result<(NewmarkState, StepMeta)> {
    check_beta(beta)?;
    let n = sys.dof();
    ensure_len(&state.q, n)?;
    ensure_len(&state.velocity, n)?;
    let tau2 = cfg.tau * cfg.tau;
    let accel = sys.acceleration(&state.q)?;
    let predictor = &state.q + &state.velocity * cfg.tau + &accel * (0.5 * tau2);
    let (q_next, meta) = if beta == 0.0 {
        (predictor, StepMeta { step_size: cfg.tau, ..StepMeta::default() })
    } else {
        let base = &state.q + &state.velocity * cfg.tau + &accel * (0.5 * tau2 * (1.0 - 2.0 * beta));
        let out = solve_newton(predictor, cfg.newton(), "newmark", |q| {
            let residual = q - &base - sys.acceleration(q)? * (beta * tau2);
            let jac = Matrix::identity(n, n) + sys.mass_inv() * sys.potential_hessian(q)? * (beta * tau2);
            Ok((residual, jac))
        })?;
        (out.x, StepMeta { newton_iters: out.iterations, residual: out.residual, step_size: cfg.tau })
    };
    let accel_next = sys.acceleration(&q_next)?;
    let velocity = &state.velocity + (accel + accel_next) * (0.5 * cfg.tau);
    ensure_finite(&q_next, "q")?;
    ensure_finite(&velocity, "velocity")?;
    Ok((NewmarkState { q: q_next, velocity }, meta))
}

/// Coordinates in which Newmark is the Störmer map:
/// `q̃ = q − βτ²a(q)`, `p̃ = M(q̇ − (τ/2)a(q))`.
pub fn newmark_to_canonical(sys: &SeparableSystem, state: &NewmarkState, beta: f64, tau: f64) -> Result<PhaseState> {
    let accel = sys.acceleration(&state.q)?;
    let q = &state.q - &accel * (beta * tau * tau);
    let p = sys.mass() * (&state.velocity - &accel * (0.5 * tau));
    finite_state(q, p)
}

/// Largest residual of the modified-variable Störmer recurrence
/// `q̃_{k+1} − 2q̃_k + q̃_{k−1} = τ²a(q_k)` along a Newmark trajectory,
/// whose states hold `(q, M q̇)`.
pub fn newmark_stormer_residual(sys: &SeparableSystem, traj: &Trajectory, beta: f64, tau: f64) -> Result<f64> {
    check_beta(beta)?;
    let chart = traj
        .states
        .iter()
        .map(|s| newmark_to_canonical(sys, &NewmarkState::from_phase(sys, s), beta, tau).map(|c| c.q))
        .collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    for k in 1..chart.len().saturating_sub(1) {
        let accel = sys.acceleration(&traj.states[k].q)?;
        let r = &chart[k + 1] - &chart[k] * 2.0 + &chart[k - 1] - accel * (tau * tau);
        worst = worst.max(r.amax());
    }
    Ok(worst)
}

/// Inverse of [`newmark_to_canonical`]; Newton on `q + βτ²M⁻¹∇V(q) = q̃`.
pub fn newmark_from_canonical(
    sys: &SeparableSystem,
    chart: &PhaseState,
    beta: f64,
    cfg: &StepperConfig,
) -> Result<NewmarkState> {
    let n = sys.dof();
    let tau2 = cfg.tau * cfg.tau;
    let q = if beta == 0.0 {
        chart.q.clone()
    } else {
        solve_newton(chart.q.clone(), cfg.newton(), "newmark chart", |q| {
            let residual = q - sys.acceleration(q)? * (beta * tau2) - &chart.q;
            let jac = Matrix::identity(n, n) + sys.mass_inv() * sys.potential_hessian(q)? * (beta * tau2);
            Ok((residual, jac))
        })?
        .x
    };
    let velocity = sys.velocity(&chart.p) + sys.acceleration(&q)? * (0.5 * cfg.tau);
    Ok(NewmarkState { q, velocity })
}

/// Implicit midpoint step with solver statistics.
pub fn midpoint_step_report(sys: &dyn Hamiltonian, state: &PhaseState, cfg: &StepperConfig) -> Result<(PhaseState, StepMeta)> {
    check_state(state, sys.dof())?;
    let z0 = state.to_vector();
    let dim = z0.len();
    let tau = cfg.tau;
    let predictor = &z0 + apply_j(&sys.gradient(&z0)?) * tau;
    let out = solve_newton(predictor, cfg.newton(), "midpoint", |z1| {
        let mid = (&z0 + z1) * 0.5;
        let residual = z1 - &z0 - apply_j(&sys.gradient(&mid)?) * tau;
        let jac = Matrix::identity(dim, dim) - jacobian_of_flow(&sys.hessian(&mid)?) * (0.5 * tau);
        Ok((residual, jac))
    })?;
    let (q, p) = split(&out.x);
    let meta = StepMeta { newton_iters: out.iterations, residual: out.residual, step_size: tau };
    Ok((finite_state(q, p)?, meta))
}

pub fn midpoint_step(sys: &dyn Hamiltonian, state: &PhaseState, cfg: &StepperConfig) -> Result<PhaseState> {
    midpoint_step_report(sys, state, cfg).map(|(s, _)| s)
}

/// `J ∇²H`, the Jacobian of the Hamiltonian vector field.
pub fn jacobian_of_flow(hessian: &Matrix) -> Matrix {
    let n = hessian.nrows() / 2;
    let mut out = Matrix::zeros(2 * n, 2 * n);
    out.rows_mut(0, n).copy_from(&hessian.rows(n, n));
    out.rows_mut(n, n).copy_from(&(-hessian.rows(0, n)));
    out
}

/// Exact derivative of the midpoint map at a converged step `z0 → z1`:
/// `(I − τ/2 A)⁻¹ (I + τ/2 A)` with `A = J∇²H` at the midpoint.
pub fn midpoint_tangent(sys: &dyn Hamiltonian, z0: &Vector, z1: &Vector, tau: f64) -> Result<Matrix> {
    let mid = (z0 + z1) * 0.5;
    let a = jacobian_of_flow(&crate::linalg::symmetrize(&sys.hessian(&mid)?)) * (0.5 * tau);
    let dim = z0.len();
    let id = Matrix::identity(dim, dim);
    Ok(inverse(&(&id - &a), "midpoint tangent")? * (id + a))
}

/// Classical fourth-order Runge–Kutta on `ż = J∇H(z)`.
pub fn rk4_step(sys: &dyn Hamiltonian, state: &PhaseState, cfg: &StepperConfig) -> Result<PhaseState> {
    check_state(state, sys.dof())?;
    let z = state.to_vector();
    let tau = cfg.tau;
    let field = |v: &Vector| -> Result<Vector> { Ok(apply_j(&sys.gradient(v)?)) };
    let k1 = field(&z)?;
    let k2 = field(&(&z + &k1 * (0.5 * tau)))?;
    let k3 = field(&(&z + &k2 * (0.5 * tau)))?;
    let k4 = field(&(&z + &k3 * tau))?;
    let next = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (tau / 6.0);
    let (q, p) = split(&next);
    finite_state(q, p)
}

/// Störmer-geometry step for a general Hamiltonian, implicit in the new
/// momentum: `p' = p − τ∂_qH(q, p')`, `q' = q + τ∂_pH(q, p')`.
pub fn stormer_general_step(sys: &dyn Hamiltonian, state: &PhaseState, cfg: &StepperConfig) -> Result<(PhaseState, StepMeta)> {
    let n = sys.dof();
    check_state(state, n)?;
    let tau = cfg.tau;
    let eval_at = |p1: &Vector| stack(&state.q, p1);
    let predictor = &state.p - split(&sys.gradient(&state.to_vector())?).0 * tau;
    let out = solve_newton(predictor, cfg.newton(), "stormer geometry", |p1| {
        let z = eval_at(p1);
        let (gq, _) = split(&sys.gradient(&z)?);
        let hess = sys.hessian(&z)?;
        let residual = p1 - &state.p + gq * tau;
        let jac = Matrix::identity(n, n) + hess.view((0, n), (n, n)) * tau;
        Ok((residual, jac))
    })?;
    let p_next = out.x;
    let (_, gp) = split(&sys.gradient(&eval_at(&p_next))?);
    let q_next = &state.q + gp * tau;
    let meta = StepMeta { newton_iters: out.iterations, residual: out.residual, step_size: tau };
    Ok((finite_state(q_next, p_next)?, meta))
}

/// Exact derivative of [`stormer_general_step`] given `(q_k, p_{k+1})`.
pub fn stormer_general_tangent(sys: &dyn Hamiltonian, q: &Vector, p_next: &Vector, tau: f64) -> Result<Matrix> {
    let n = q.len();
    let hess = sys.hessian(&stack(q, p_next))?;
    let hqq = hess.view((0, 0), (n, n)).into_owned();
    let hqp = hess.view((0, n), (n, n)).into_owned();
    let hpq = hess.view((n, 0), (n, n)).into_owned();
    let hpp = hess.view((n, n), (n, n)).into_owned();
    let id = Matrix::identity(n, n);
    // (I + τH_qp) dp' = dp − τH_qq dq ;  dq' = (I + τH_pq) dq + τH_pp dp'
    let solve_p = inverse(&(&id + &hqp * tau), "stormer tangent")?;
    let dp_dq = -(&solve_p * &hqq) * tau;
    let dp_dp = solve_p;
    let dq_dq = &id + &hpq * tau + &hpp * &dp_dq * tau;
    let dq_dp = &hpp * &dp_dp * tau;
    let mut t = Matrix::zeros(2 * n, 2 * n);
    t.view_mut((0, 0), (n, n)).copy_from(&dq_dq);
    t.view_mut((0, n), (n, n)).copy_from(&dq_dp);
    t.view_mut((n, 0), (n, n)).copy_from(&dp_dq);
    t.view_mut((n, n), (n, n)).copy_from(&dp_dp);
    Ok(t)
}

/// A map of phase space onto itself, `z ↦ φ(z)`.
pub trait OneStepMap: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, z: &Vector) -> Result<Vector>;
}

/// Adapts a closure into a [`OneStepMap`].
pub struct FnMap<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Vector) -> Result<Vector> + Send + Sync> FnMap<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&Vector) -> Result<Vector> + Send + Sync> OneStepMap for FnMap<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, z: &Vector) -> Result<Vector> {
        (self.f)(z)
    }
}

/// One step of a [`Scheme`] viewed as a canonical phase-space map.
///
/// Störmer acts through its Hamiltonian form; Newmark acts in the
/// coordinates of [`newmark_to_canonical`].
pub struct SchemeMap<'a> {
    pub scheme: Scheme,
    pub system: &'a dyn Hamiltonian,
    pub cfg: StepperConfig,
}

impl<'a> SchemeMap<'a> {
    pub fn new(scheme: Scheme, system: &'a dyn Hamiltonian, cfg: StepperConfig) -> Self {
        Self { scheme, system, cfg }
    }
}

impl OneStepMap for SchemeMap<'_> {
    fn dim(&self) -> usize {
        2 * self.system.dof()
    }

    fn apply(&self, z: &Vector) -> Result<Vector> {
        let state = PhaseState::from_vector(z)?;
        let next = match self.scheme {
            Scheme::Newmark { beta } => {
                let sys = separable(self.system, "newmark")?;
                let start = newmark_from_canonical(sys, &state, beta, &self.cfg)?;
                let (end, _) = newmark_step(sys, &start, beta, &self.cfg)?;
                newmark_to_canonical(sys, &end, beta, self.cfg.tau)?
            }
            _ => single_step(self.scheme, self.system, &state, &self.cfg)?.0,
        };
        Ok(next.to_vector())
    }
}

/// One phase-space step. Störmer is taken in its Hamiltonian form and
/// Newmark interprets `p` as `M q̇`.
pub fn single_step(
    scheme: Scheme,
    sys: &dyn Hamiltonian,
    state: &PhaseState,
    cfg: &StepperConfig,
) -> Result<(PhaseState, StepMeta)> {
    let plain = StepMeta { step_size: cfg.tau, ..StepMeta::default() };
    match scheme {
        Scheme::Stormer | Scheme::StormerHamiltonian => {
            Ok((stormer_hamiltonian_step(separable(sys, scheme.key())?, state, cfg)?, plain))
        }
        Scheme::Verlet => Ok((velocity_verlet_step(separable(sys, "verlet")?, state, cfg)?, plain)),
        Scheme::Newmark { beta } => {
            let s = separable(sys, "newmark")?;
            let (next, meta) = newmark_step(s, &NewmarkState::from_phase(s, state), beta, cfg)?;
            Ok((next.to_phase(s), meta))
        }
        Scheme::Midpoint => midpoint_step_report(sys, state, cfg),
        Scheme::Rk4 => Ok((rk4_step(sys, state, cfg)?, plain)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
    pub meta: Vec<StepMeta>,
    /// Scheme that produced the samples, when known.
    pub scheme: Option<Scheme>,
}

impl Trajectory {
    pub fn new(initial: PhaseState, scheme: Option<Scheme>) -> Self {
        Self { times: vec![0.0], states: vec![initial], meta: vec![StepMeta::default()], scheme }
    }

    pub fn push(&mut self, t: f64, state: PhaseState, meta: StepMeta) {
        self.times.push(t);
        self.states.push(state);
        self.meta.push(meta);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &PhaseState {
        self.states.last().expect("trajectory holds the initial sample")
    }

    pub fn dof(&self) -> usize {
        self.states[0].dof()
    }

    /// Columns `k, t, q…, p…, newton_iters`; `skip_initial` drops sample 0.
    pub fn to_csv(&self, skip_initial: bool) -> CsvTable {
        let n = self.dof();
        let mut header = vec!["k".to_string(), "t".to_string()];
        header.extend(indexed_columns("q", n));
        header.extend(indexed_columns("p", n));
        header.push("newton_iters".into());
        let mut table = CsvTable::new(header);
        let start = usize::from(skip_initial);
        for k in start..self.len() {
            let mut row = vec![k.to_string(), fmt_f64(self.times[k])];
            row.extend(self.states[k].q.iter().map(|x| fmt_f64(*x)));
            row.extend(self.states[k].p.iter().map(|x| fmt_f64(*x)));
            row.push(self.meta[k].newton_iters.to_string());
            table.push_row(row);
        }
        table
    }
}

/// Applies `scheme` for `n_steps` steps of size `cfg.tau`.
pub fn integrate(
    scheme: Scheme,
    sys: &dyn Hamiltonian,
    initial: &PhaseState,
    n_steps: usize,
    cfg: &StepperConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_state(initial, sys.dof())?;
    if let Scheme::Newmark { beta } = scheme {
        check_beta(beta)?;
    }
    if scheme.requires_separable() {
        separable(sys, scheme.key())?;
    }
    let mut traj = Trajectory::new(initial.clone(), Some(scheme));
    let time = |k: usize| k as f64 * cfg.tau;

    if scheme == Scheme::Stormer {
        let sys = separable(sys, "stormer")?;
        if n_steps == 0 {
            return Ok(traj);
        }
        let plain = StepMeta { step_size: cfg.tau, ..StepMeta::default() };
        let first = stormer_hamiltonian_step(sys, initial, cfg).map_err(|e| e.at_step(1))?;
        let mut q_prev = initial.q.clone();
        let mut q_curr = first.q.clone();
        traj.push(time(1), first, plain);
        for k in 2..=n_steps {
            let q_next = stormer_step(sys, &q_prev, &q_curr, cfg).map_err(|e| e.at_step(k))?;
            let p_next = sys.mass() * (&q_next - &q_curr) / cfg.tau;
            traj.push(time(k), PhaseState { q: q_next.clone(), p: p_next }, plain);
            q_prev = std::mem::replace(&mut q_curr, q_next);
        }
        return Ok(traj);
    }

    let mut state = initial.clone();
    for k in 1..=n_steps {
        let (next, meta) = single_step(scheme, sys, &state, cfg).map_err(|e| e.at_step(k))?;
        traj.push(time(k), next.clone(), meta);
        state = next;
    }
    Ok(traj)
}
