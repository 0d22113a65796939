//! Energy-conserving schemes in the extended phase space `(q, t, p, e)`.
//!
//! Time is promoted to a coordinate with conjugate momentum `e = −H_d`; each
//! step solves for the physical increment `h_k = t_{k+1} − t_k` that keeps `e`
//! fixed. The energy equation can lose its positive root (the step map then
//! has no continuation) and both schemes report that as a step failure.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::integrators::{midpoint_step, OneStepMap, StepperConfig};
use crate::linalg::{apply_j, ensure_len, split, stack};
use crate::newton::{solve_newton, NewtonOptions};
use crate::report::{fmt_f64, indexed_columns, CsvTable};
use crate::systems::{ExtendedPhaseState, Hamiltonian, PhaseState, SeparableSystem};
use crate::{Matrix, Vector};

/// Upper end of the step-size bracket, in units of `τ`.
pub const BRACKET_FACTOR: f64 = 4.0;
/// Sub-intervals scanned for sign changes inside the bracket.
pub const BRACKET_SAMPLES: usize = 64;
/// Absolute width at which bisection stops.
pub const BISECTION_TOL: f64 = 1e-13;
pub const POLISH_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedStepRecord {
    pub state: ExtendedPhaseState,
    /// Physical time increment of the step that produced `state`.
    pub h: f64,
    pub root_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtendedScheme {
    Stormer,
    Midpoint,
}

impl ExtendedScheme {
    pub const KEYS: [&'static str; 2] = ["extended-stormer", "extended-midpoint"];

    pub fn key(self) -> &'static str {
        match self {
            ExtendedScheme::Stormer => "extended-stormer",
            ExtendedScheme::Midpoint => "extended-midpoint",
        }
    }
}

impl FromStr for ExtendedScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extended-stormer" => Ok(ExtendedScheme::Stormer),
            "extended-midpoint" => Ok(ExtendedScheme::Midpoint),
            other => Err(Error::UnknownKey { key: other.into(), valid: Self::KEYS.join(", ") }),
        }
    }
}

impl fmt::Display for ExtendedScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

fn separable(sys: &dyn Hamiltonian) -> Result<&SeparableSystem> {
    sys.as_separable().ok_or_else(|| Error::RequiresSeparable("extended-stormer".into()))
}

/// Störmer discrete energy `½ p_{k+1}ᵀM⁻¹p_{k+1} + V(q_k)`.
pub fn stormer_discrete_energy(sys: &SeparableSystem, q: &Vector, p_next: &Vector) -> Result<f64> {
    Ok(sys.kinetic(p_next) + sys.potential_value(q)?)
}

/// Midpoint discrete energy `H((z_k + z_{k+1})/2)`.
pub fn midpoint_discrete_energy(sys: &dyn Hamiltonian, z: &Vector, z_next: &Vector) -> Result<f64> {
    sys.energy(&((z + z_next) * 0.5))
}

/// Extended initial state whose energy makes the first step exactly `τ`.
///
/// With `e_0 = −H(z_0)` the constraint typically admits only `h = 0` (at a
/// turning point, for instance), so `e` is taken from one plain step instead.
pub fn bootstrap(scheme: ExtendedScheme, sys: &dyn Hamiltonian, z0: &PhaseState, cfg: &StepperConfig) -> Result<ExtendedPhaseState> {
    cfg.validate()?;
    let energy = match scheme {
        ExtendedScheme::Stormer => {
            let s = separable(sys)?;
            let p_next = &z0.p - s.potential_gradient(&z0.q)? * cfg.tau;
            stormer_discrete_energy(s, &z0.q, &p_next)?
        }
        ExtendedScheme::Midpoint => {
            let next = midpoint_step(sys, z0, cfg)?;
            midpoint_discrete_energy(sys, &z0.to_vector(), &next.to_vector())?
        }
    };
    ExtendedPhaseState::new(z0.clone(), 0.0, -energy)
}

/// Bisection on a sign-changing bracket followed by Newton polishing.
fn bracketed_root(f: &dyn Fn(f64) -> f64, df: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, usize) {
    let mut f_lo = f(lo);
    let mut iters = 0;
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        iters += 1;
        if f_mid == 0.0 {
            return (mid, iters);
        }
        if (f_mid > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    let mut root = 0.5 * (lo + hi);
    for _ in 0..POLISH_STEPS {
        let slope = df(root);
        if slope == 0.0 {
            break;
        }
        let trial = root - f(root) / slope;
        iters += 1;
        if trial.is_finite() && f(trial).abs() <= f(root).abs() {
            root = trial;
        }
    }
    (root, iters)
}

/// Extended Störmer step: `p' = p − h∇V(q)`, `q' = q + hM⁻¹p'` with `h`
/// chosen so that `½p'ᵀM⁻¹p' + V(q) = −e`. Among the roots in `(0, 4τ]` the
/// one closest to `τ` is taken.
pub fn extended_stormer_step(sys: &SeparableSystem, state: &ExtendedPhaseState, cfg: &StepperConfig) -> Result<ExtendedStepRecord> {
    cfg.validate()?;
    let n = sys.dof();
    ensure_len(&state.q, n)?;
    ensure_len(&state.p, n)?;
    let grad = sys.potential_gradient(&state.q)?;
    let v = sys.potential_value(&state.q)?;
    let m_inv_grad = sys.velocity(&grad);
    let curvature = 0.5 * grad.dot(&m_inv_grad);
    let tau = cfg.tau;

    let advance = |h: f64, iters: usize| -> Result<ExtendedStepRecord> {
        let p = &state.p - &grad * h;
        let q = &state.q + sys.velocity(&p) * h;
        let next = ExtendedPhaseState::new(PhaseState::new(q, p)?, state.t + h, state.e)?;
        Ok(ExtendedStepRecord { state: next, h, root_iters: iters })
    };

    let residual = |h: f64| sys.kinetic(&(&state.p - &grad * h)) + v + state.e;
    if curvature == 0.0 {
        // The constraint does not depend on h.
        if residual(tau).abs() > cfg.newton_tol.max(1e-12) * (1.0 + state.e.abs()) {
            return Err(Error::NoEnergyRoot(format!(
                "constraint is step independent and violated by {:.3e}",
                residual(tau)
            )));
        }
        return advance(tau, 0);
    }

    let slope = |h: f64| -m_inv_grad.dot(&(&state.p - &grad * h));
    let upper = BRACKET_FACTOR * tau;
    let width = upper / BRACKET_SAMPLES as f64;
    let mut best: Option<(f64, usize)> = None;
    let mut lo = 0.0;
    let mut f_lo = residual(lo);
    for i in 1..=BRACKET_SAMPLES {
        let hi = if i == BRACKET_SAMPLES { upper } else { i as f64 * width };
        let f_hi = residual(hi);
        if f_hi == 0.0 || (f_lo != 0.0 && (f_lo > 0.0) != (f_hi > 0.0)) {
            let (root, iters) = if f_hi == 0.0 { (hi, 0) } else { bracketed_root(&residual, &slope, lo, hi) };
            if root > 0.0 && best.is_none_or(|(b, _)| (root - tau).abs() < (b - tau).abs()) {
                best = Some((root, iters));
            }
        }
        lo = hi;
        f_lo = f_hi;
    }
    let (h, iters) = best.ok_or_else(|| {
        Error::NoEnergyRoot(format!(
            "no step in (0, {upper:.3e}] reaches e = {:.6e} at q = {:?}",
            state.e,
            state.q.as_slice()
        ))
    })?;
    advance(h, iters)
}

/// Residual and Jacobian of the extended midpoint equations in the unknowns
/// `w = (z_{k+1}, t_{k+1}, e_{k+1})`.
fn extended_midpoint_system(sys: &dyn Hamiltonian, z0: &Vector, t0: f64, e0: f64, w: &Vector) -> Result<(Vector, Matrix)> {
    let dim = z0.len();
    let z1 = w.rows(0, dim).into_owned();
    let (t1, e1) = (w[dim], w[dim + 1]);
    let h = t1 - t0;
    let mid = (z0 + &z1) * 0.5;
    let grad = sys.gradient(&mid)?;
    let field = apply_j(&grad);
    let flow_jac = crate::integrators::jacobian_of_flow(&sys.hessian(&mid)?);

    let mut r = Vector::zeros(dim + 2);
    r.rows_mut(0, dim).copy_from(&(&z1 - z0 - &field * h));
    r[dim] = e1 - e0;
    r[dim + 1] = 0.5 * (e1 + e0) + sys.energy(&mid)?;

    let mut jac = Matrix::zeros(dim + 2, dim + 2);
    jac.view_mut((0, 0), (dim, dim)).copy_from(&(Matrix::identity(dim, dim) - flow_jac * (0.5 * h)));
    jac.view_mut((0, dim), (dim, 1)).copy_from(&(-&field));
    jac[(dim, dim + 1)] = 1.0;
    jac.view_mut((dim + 1, 0), (1, dim)).copy_from(&(grad.transpose() * 0.5));
    jac[(dim + 1, dim + 1)] = 0.5;
    Ok((r, jac))
}

/// Extended midpoint step: the midpoint equations with step `t_{k+1} − t_k`
/// plus `e_{k+1} = e_k` and `(e_{k+1} + e_k)/2 = −H(midpoint)`, solved by
/// Newton in `2n + 2` unknowns.
pub fn extended_midpoint_step(sys: &dyn Hamiltonian, state: &ExtendedPhaseState, cfg: &StepperConfig) -> Result<ExtendedStepRecord> {
    cfg.validate()?;
    let n = sys.dof();
    ensure_len(&state.q, n)?;
    ensure_len(&state.p, n)?;
    let z0 = stack(&state.q, &state.p);
    let grad0 = sys.gradient(&z0)?;
    if grad0.iter().all(|g| *g == 0.0) {
        // Stationary point: the constraint cannot fix the step.
        let next = midpoint_step(sys, &state.phase(), cfg)?;
        let rec = ExtendedPhaseState::new(next, state.t + cfg.tau, state.e)?;
        return Ok(ExtendedStepRecord { state: rec, h: cfg.tau, root_iters: 0 });
    }
    let dim = 2 * n;
    let mut guess = Vector::zeros(dim + 2);
    guess.rows_mut(0, dim).copy_from(&(&z0 + apply_j(&grad0) * cfg.tau));
    guess[dim] = state.t + cfg.tau;
    guess[dim + 1] = state.e;
    let opts = NewtonOptions { tol: cfg.newton_tol, max_iter: cfg.newton_max_iter, polish: 1 };
    let out = solve_newton(guess, opts, "extended midpoint (turning point of the energy constraint)", |w| {
        extended_midpoint_system(sys, &z0, state.t, state.e, w)
    })?;
    let h = out.x[dim] - state.t;
    if !(h > 0.0) {
        return Err(Error::NoEnergyRoot(format!("newton converged to non-positive step {h:.3e}")));
    }
    let (q, p) = split(&out.x.rows(0, dim).into_owned());
    let next = ExtendedPhaseState::new(PhaseState::new(q, p)?, out.x[dim], out.x[dim + 1])?;
    Ok(ExtendedStepRecord { state: next, h, root_iters: out.iterations })
}

pub fn extended_step(scheme: ExtendedScheme, sys: &dyn Hamiltonian, state: &ExtendedPhaseState, cfg: &StepperConfig) -> Result<ExtendedStepRecord> {
    match scheme {
        ExtendedScheme::Stormer => extended_stormer_step(separable(sys)?, state, cfg),
        ExtendedScheme::Midpoint => extended_midpoint_step(sys, state, cfg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedTrajectory {
    pub scheme: ExtendedScheme,
    /// Record 0 is the bootstrapped initial state with `h = 0`.
    pub records: Vec<ExtendedStepRecord>,
}

impl ExtendedTrajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Discrete energy of every step (`len − 1` entries).
    pub fn discrete_energies(&self, sys: &dyn Hamiltonian) -> Result<Vec<f64>> {
        self.records
            .windows(2)
            .map(|w| {
                let (a, b) = (&w[0].state, &w[1].state);
                match self.scheme {
                    ExtendedScheme::Stormer => stormer_discrete_energy(separable(sys)?, &a.q, &b.p),
                    ExtendedScheme::Midpoint => {
                        midpoint_discrete_energy(sys, &stack(&a.q, &a.p), &stack(&b.q, &b.p))
                    }
                }
            })
            .collect()
    }

    /// `max_k |H_d,k − H_d,0|`, recomputed from the states.
    pub fn discrete_energy_drift(&self, sys: &dyn Hamiltonian) -> Result<f64> {
        let energies = self.discrete_energies(sys)?;
        let first = energies.first().copied().unwrap_or(0.0);
        Ok(energies.iter().fold(0.0, |acc, e| acc.max((e - first).abs())))
    }

    /// `max_k |e_k − e_0|`.
    pub fn momentum_drift(&self) -> f64 {
        let e0 = self.records[0].state.e;
        self.records.iter().fold(0.0, |acc, r| acc.max((r.state.e - e0).abs()))
    }

    /// Columns `k, t, q…, p…, h_k, e_k, root_iters`.
    pub fn to_csv(&self, skip_initial: bool) -> CsvTable {
        let n = self.records[0].state.q.len();
        let mut header = vec!["k".to_string(), "t".to_string()];
        header.extend(indexed_columns("q", n));
        header.extend(indexed_columns("p", n));
        header.extend(["h_k", "e_k", "root_iters"].map(String::from));
        let mut table = CsvTable::new(header);
        for (k, rec) in self.records.iter().enumerate().skip(usize::from(skip_initial)) {
            let mut row = vec![k.to_string(), fmt_f64(rec.state.t)];
            row.extend(rec.state.q.iter().map(|x| fmt_f64(*x)));
            row.extend(rec.state.p.iter().map(|x| fmt_f64(*x)));
            row.extend([fmt_f64(rec.h), fmt_f64(rec.state.e), rec.root_iters.to_string()]);
            table.push_row(row);
        }
        table
    }
}

/// Bootstraps `e` and applies `n_steps` extended steps.
pub fn integrate_extended(
    scheme: ExtendedScheme,
    sys: &dyn Hamiltonian,
    initial: &PhaseState,
    n_steps: usize,
    cfg: &StepperConfig,
) -> Result<ExtendedTrajectory> {
    let start = bootstrap(scheme, sys, initial, cfg)?;
    let mut records = vec![ExtendedStepRecord { state: start, h: 0.0, root_iters: 0 }];
    for k in 1..=n_steps {
        let rec = extended_step(scheme, sys, &records[k - 1].state, cfg).map_err(|e| e.at_step(k))?;
        records.push(rec);
    }
    Ok(ExtendedTrajectory { scheme, records })
}

/// Exact Jacobian of an extended step in the ordering `(q, t, p, e)`,
/// by implicit differentiation of the step equations at a solved step.
pub fn extended_tangent(
    scheme: ExtendedScheme,
    sys: &dyn Hamiltonian,
    start: &ExtendedPhaseState,
    step: &ExtendedStepRecord,
) -> Result<Matrix> {
    match scheme {
        ExtendedScheme::Stormer => stormer_tangent(separable(sys)?, start, step),
        ExtendedScheme::Midpoint => midpoint_tangent(sys, start, step),
    }
}

fn stormer_tangent(sys: &SeparableSystem, start: &ExtendedPhaseState, step: &ExtendedStepRecord) -> Result<Matrix> {
    let n = sys.dof();
    let h = step.h;
    let grad = sys.potential_gradient(&start.q)?;
    let hess = sys.potential_hessian(&start.q)?;
    let p_new = &step.state.p;
    let vel = sys.velocity(p_new);
    let sigma = vel.dot(&grad);
    if sigma == 0.0 {
        return Err(Error::SingularJacobian { context: "extended stormer tangent (energy constraint stationary in h)".into() });
    }
    // dh = [(g − h G u)ᵀ dq + uᵀ dp + de] / σ with u = M⁻¹p'.
    let dh_dq = (&grad - &hess * &vel * h).transpose() / sigma;
    let dh_dp = vel.transpose() / sigma;
    let dh_de = 1.0 / sigma;
    let id = Matrix::identity(n, n);
    let grad_col = Matrix::from_column_slice(n, 1, grad.as_slice());
    let vel_col = Matrix::from_column_slice(n, 1, vel.as_slice());
    // p' = p − h g(q)
    let dp_dq = -(&hess * h) - &grad_col * &dh_dq;
    let dp_dp = &id - &grad_col * &dh_dp;
    let dp_de = -&grad * dh_de;
    // q' = q + h M⁻¹p'
    let m_inv = sys.mass_inv();
    let dq_dq = &id + &vel_col * &dh_dq + m_inv * &dp_dq * h;
    let dq_dp = &vel_col * &dh_dp + m_inv * &dp_dp * h;
    let dq_de = &vel * dh_de + m_inv * &dp_de * h;

    let (it, ip, ie) = (n, n + 1, 2 * n + 1);
    let mut t = Matrix::zeros(2 * n + 2, 2 * n + 2);
    t.view_mut((0, 0), (n, n)).copy_from(&dq_dq);
    t.view_mut((0, ip), (n, n)).copy_from(&dq_dp);
    t.view_mut((0, ie), (n, 1)).copy_from(&dq_de);
    t.view_mut((ip, 0), (n, n)).copy_from(&dp_dq);
    t.view_mut((ip, ip), (n, n)).copy_from(&dp_dp);
    t.view_mut((ip, ie), (n, 1)).copy_from(&dp_de);
    t.view_mut((it, 0), (1, n)).copy_from(&dh_dq);
    t[(it, it)] = 1.0;
    t.view_mut((it, ip), (1, n)).copy_from(&dh_dp);
    t[(it, ie)] = dh_de;
    t[(ie, ie)] = 1.0;
    Ok(t)
}

fn midpoint_tangent(sys: &dyn Hamiltonian, start: &ExtendedPhaseState, step: &ExtendedStepRecord) -> Result<Matrix> {
    let n = sys.dof();
    let dim = 2 * n;
    let z0 = stack(&start.q, &start.p);
    let end = &step.state;
    let mut w = Vector::zeros(dim + 2);
    w.rows_mut(0, dim).copy_from(&stack(&end.q, &end.p));
    w[dim] = end.t;
    w[dim + 1] = end.e;
    let (_, r_w) = extended_midpoint_system(sys, &z0, start.t, start.e, &w)?;

    let mid = (&z0 + w.rows(0, dim)) * 0.5;
    let grad = sys.gradient(&mid)?;
    let flow_jac = crate::integrators::jacobian_of_flow(&sys.hessian(&mid)?);
    // Derivatives of the residual with respect to the inputs (z0, t0, e0).
    let mut r_x = Matrix::zeros(dim + 2, dim + 2);
    r_x.view_mut((0, 0), (dim, dim))
        .copy_from(&(-Matrix::identity(dim, dim) - flow_jac * (0.5 * step.h)));
    r_x.view_mut((0, dim), (dim, 1)).copy_from(&apply_j(&grad));
    r_x[(dim, dim + 1)] = -1.0;
    r_x.view_mut((dim + 1, 0), (1, dim)).copy_from(&(grad.transpose() * 0.5));
    r_x[(dim + 1, dim + 1)] = 0.5;
    let dw_dx = -crate::linalg::inverse(&r_w, "extended midpoint tangent")? * r_x;

    // Reorder from (z, t, e) = (q, p, t, e) to (q, t, p, e).
    let order: Vec<usize> = (0..n).chain([dim]).chain(n..dim).chain([dim + 1]).collect();
    Ok(Matrix::from_fn(dim + 2, dim + 2, |i, j| dw_dx[(order[i], order[j])]))
}

/// Symplectic defect of one extended step from each phase-space probe,
/// using the exact tangent on the full `(q, t, p, e)` space. Each probe
/// starts at `t = 0` with `e` bootstrapped as in [`integrate_extended`].
pub fn extended_defect_reports(
    scheme: ExtendedScheme,
    sys: &dyn Hamiltonian,
    probes: &[Vector],
    cfg: &StepperConfig,
) -> Result<Vec<crate::diagnostics::SymplecticDefectReport>> {
    probes
        .iter()
        .map(|z| {
            let start = bootstrap(scheme, sys, &PhaseState::from_vector(z)?, cfg)?;
            let step = extended_step(scheme, sys, &start, cfg)?;
            let tangent = extended_tangent(scheme, sys, &start, &step)?;
            Ok(crate::diagnostics::analytic_defect(&tangent, z.clone()))
        })
        .collect()
}

/// `(q, p)` block of an extended tangent: the derivative at fixed `e`.
pub fn fixed_energy_block(tangent: &Matrix) -> Matrix {
    let n = tangent.nrows() / 2 - 1;
    let idx: Vec<usize> = (0..n).chain(n + 1..2 * n + 1).collect();
    Matrix::from_fn(2 * n, 2 * n, |i, j| tangent[(idx[i], idx[j])])
}

/// `(q, p) ↦ (q', p')` at fixed energy momentum `e`.
pub struct ExtendedPhaseMap<'a> {
    pub scheme: ExtendedScheme,
    pub system: &'a dyn Hamiltonian,
    pub e: f64,
    pub cfg: StepperConfig,
}

impl OneStepMap for ExtendedPhaseMap<'_> {
    fn dim(&self) -> usize {
        2 * self.system.dof()
    }

    fn apply(&self, z: &Vector) -> Result<Vector> {
        let state = ExtendedPhaseState::new(PhaseState::from_vector(z)?, 0.0, self.e)?;
        let next = extended_step(self.scheme, self.system, &state, &self.cfg)?.state;
        Ok(stack(&next.q, &next.p))
    }
}

/// `(q, t, p, e) ↦ (q', t', p', e')` on the full extended space.
pub struct ExtendedSpaceMap<'a> {
    pub scheme: ExtendedScheme,
    pub system: &'a dyn Hamiltonian,
    pub cfg: StepperConfig,
}

impl OneStepMap for ExtendedSpaceMap<'_> {
    fn dim(&self) -> usize {
        2 * self.system.dof() + 2
    }

    fn apply(&self, w: &Vector) -> Result<Vector> {
        let state = ExtendedPhaseState::from_vector(w)?;
        Ok(extended_step(self.scheme, self.system, &state, &self.cfg)?.state.to_vector())
    }
}
