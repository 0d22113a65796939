//! Experiment implementations. Each returns its CSV tables and a summary.

use std::str::FromStr;

use geoint_core::dct::{energy_invariance_experiment, RotationMap};
use geoint_core::diagnostics::{
    defect_reports_csv, energy_error_series, max_abs_series, max_defect, sample_probes, symplectic_defect,
};
use geoint_core::extended::{extended_defect_reports, integrate_extended, ExtendedScheme};
use geoint_core::genfun::{exactness_experiment, StmMethod};
use geoint_core::integrators::SchemeMap;
use geoint_core::optctrl::{
    perturbation_check, shoot, DmpStepMap, Geometry, HeisenbergProblem, PerturbationOptions, ShootingOptions,
};
use geoint_core::report::{fmt_f64, indexed_columns, CsvTable};
use geoint_core::systems::EarthZonal;
use geoint_core::{integrate, PhaseState, Scheme, StepperConfig, SystemKind, Vector};

use crate::config::Params;
use crate::error::CliError;

/// Tables to write and `key = value` summary lines.
#[derive(Debug, Default)]
pub struct Output {
    pub tables: Vec<(&'static str, CsvTable)>,
    pub summary: Vec<(String, String)>,
}

impl Output {
    fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    fn number(&mut self, key: &str, value: f64) {
        self.note(key, fmt_f64(value));
    }
}

pub fn run_experiment(key: &str, params: &Params<'_>) -> Result<Output, CliError> {
    match key {
        "integrate" => integrate_run(params),
        "exactness" => exactness_run(params),
        "energy-conserving" => energy_conserving_run(params),
        "dct-energy" => dct_energy_run(params),
        "control-heisenberg" => control_heisenberg_run(params),
        "defect-sweep" => defect_sweep_run(params),
        other => Err(CliError::config(Some("experiment"), format!("no runner for `{other}`"))),
    }
}

fn default_state(kind: SystemKind) -> PhaseState {
    let state = |q: &[f64], p: &[f64]| PhaseState::from_slices(q, p).expect("valid defaults");
    match kind {
        SystemKind::Harmonic => state(&[1.0], &[0.0]),
        SystemKind::DoubleWell => state(&[1.0], &[0.05]),
        SystemKind::EarthJ2J3 => EarthZonal::reference_initial_state(),
        SystemKind::Heisenberg => state(&[0.0, 0.0, 0.0], &[-1.0, 0.0, 0.5]),
    }
}

fn initial_state(params: &Params<'_>, kind: SystemKind) -> Result<PhaseState, CliError> {
    let default = default_state(kind);
    let dof = default.dof();
    let pick = |key: &str, fallback: &Vector| -> Result<Vector, CliError> {
        match params.list(key)? {
            None => Ok(fallback.clone()),
            Some(v) if v.len() == dof => Ok(Vector::from_vec(v)),
            Some(v) => Err(CliError::config(Some(key), format!("{} needs {dof} values, got {}", kind.key(), v.len()))),
        }
    };
    let q = pick("q0", &default.q)?;
    let p = pick("p0", &default.p)?;
    Ok(PhaseState::new(q, p)?)
}

fn parse_key<T: FromStr<Err = geoint_core::Error>>(params: &Params<'_>, key: &str) -> Result<T, CliError> {
    params.parse::<T>(key)
}

fn scheme_of(params: &Params<'_>) -> Result<Scheme, CliError> {
    match parse_key::<Scheme>(params, "scheme")? {
        Scheme::Newmark { .. } => {
            let beta = params.float("beta")?;
            if !(0.0..=0.5).contains(&beta) {
                return Err(CliError::config(Some("beta"), format!("must lie in [0, 0.5], got {beta}")));
            }
            Ok(Scheme::Newmark { beta })
        }
        other => Ok(other),
    }
}

/// `n_steps` when given, otherwise `round(T / tau)`.
fn step_count(params: &Params<'_>, tau: f64, default_t: f64) -> Result<usize, CliError> {
    if let Some(n) = params.parse_auto::<usize>("n_steps")? {
        return Ok(n);
    }
    let t = match params.auto("T") {
        None => default_t,
        Some(_) => params.float("T")?,
    };
    if t < 0.0 {
        return Err(CliError::config(Some("T"), "must be non-negative"));
    }
    Ok((t / tau).round() as usize)
}

fn integrate_run(params: &Params<'_>) -> Result<Output, CliError> {
    let kind: SystemKind = parse_key(params, "system")?;
    let scheme = scheme_of(params)?;
    let tau = params.positive("tau")?;
    let n_steps = step_count(params, tau, 100.0)?;
    let initial = initial_state(params, kind)?;
    let sys = kind.build();
    let mut out = Output::default();
    out.note("system", kind);
    out.note("scheme", scheme);
    out.note("n_steps", n_steps);

    let traj = integrate(scheme, &*sys, &initial, n_steps, &StepperConfig::new(tau))?;
    let errors = energy_error_series(&traj, &*sys)?;
    let mut energy = CsvTable::new(["k", "t", "energy_error"]);
    // An empty run has no samples at all, not even the initial one.
    let skip = if n_steps == 0 { traj.len() } else { 0 };
    for (k, e) in errors.iter().enumerate().skip(skip) {
        energy.push_row(vec![k.to_string(), fmt_f64(traj.times[k]), fmt_f64(*e)]);
    }
    let trajectory = if n_steps == 0 { CsvTable::new(traj.to_csv(false).header().to_vec()) } else { traj.to_csv(false) };
    out.number("max_abs_energy_error", max_abs_series(&errors));
    out.tables.push(("trajectory.csv", trajectory));
    out.tables.push(("energy_error.csv", energy));
    Ok(out)
}

fn exactness_run(params: &Params<'_>) -> Result<Output, CliError> {
    let kind: SystemKind = parse_key(params, "system")?;
    let method: StmMethod = parse_key(params, "scheme")?;
    let tau = params.positive("tau")?;
    let mask = params.positive("mask")?;
    let t_final = match params.auto("T") {
        Some(_) => params.float("T")?,
        None => match kind {
            SystemKind::EarthJ2J3 => 10.0 * std::f64::consts::PI,
            SystemKind::Harmonic => 100.0,
            _ => 10.0,
        },
    };
    let initial = initial_state(params, kind)?;
    let sys = kind.build();
    let series = exactness_experiment(&*sys, &initial, method, tau, t_final, mask)?;
    let mut out = Output::default();
    out.note("system", kind);
    out.note("scheme", method);
    out.number("T", t_final);
    out.number("max_masked_defect", series.max_masked_defect());
    out.number("final_defect", series.final_defect().unwrap_or(f64::NAN));
    out.note("masked_samples", series.masked_count());
    out.number("final_stm_symplectic_defect", series.final_symplectic_defect);
    out.tables.push(("exactness.csv", series.to_csv(false)));
    Ok(out)
}

fn energy_conserving_run(params: &Params<'_>) -> Result<Output, CliError> {
    let kind: SystemKind = parse_key(params, "system")?;
    let scheme: ExtendedScheme = parse_key(params, "scheme")?;
    let tau = params.positive("tau")?;
    let n_steps: usize = params.parse("n_steps")?;
    let initial = initial_state(params, kind)?;
    let sys = kind.build();
    let traj = integrate_extended(scheme, &*sys, &initial, n_steps, &StepperConfig::new(tau))?;
    let mut out = Output::default();
    out.note("system", kind);
    out.note("scheme", scheme);
    out.note("n_steps", n_steps);
    out.number("discrete_energy_drift", traj.discrete_energy_drift(&*sys)?);
    out.number("energy_momentum_drift", traj.momentum_drift());
    out.number("final_t", traj.records.last().map_or(0.0, |r| r.state.t));
    let table = traj.to_csv(false);
    let table = if n_steps == 0 { CsvTable::new(table.header().to_vec()) } else { table };
    out.tables.push(("extended_trajectory.csv", table));
    Ok(out)
}

fn dct_energy_run(params: &Params<'_>) -> Result<Output, CliError> {
    let kind: SystemKind = parse_key(params, "system")?;
    if kind.build().dof() != 1 {
        return Err(CliError::config(Some("system"), "the rotation map acts on one degree of freedom"));
    }
    let tau = params.positive("tau")?;
    let n_steps: usize = params.parse("n_steps")?;
    let theta = match params.auto("theta") {
        Some(_) => params.float("theta")?,
        None => RotationMap::default_theta(),
    };
    let initial = initial_state(params, kind)?;
    let sys = kind.build();
    let report = energy_invariance_experiment(&RotationMap::new(theta)?, &*sys, &initial, n_steps, &StepperConfig::new(tau))?;
    let mut out = Output::default();
    out.note("system", kind);
    out.number("theta", theta);
    out.note("n_steps", n_steps);
    out.number("max_abs_difference", report.max_difference());
    out.tables.push(("dct_energy.csv", report.to_csv(n_steps == 0)));
    Ok(out)
}

/// Costate guesses tried in order until shooting converges.
fn costate_guesses(target: &Vector, horizon: f64) -> Vec<Vector> {
    let scale = 1.0 / horizon;
    let base = [
        [-0.5 * target[0], -0.5 * target[1], 0.2],
        [-target[0], 0.3, 0.1],
        [0.5, 0.5, 2.0 * std::f64::consts::PI],
        [1.0, 0.0, 2.0 * std::f64::consts::PI],
        [0.3, -0.7, -2.0 * std::f64::consts::PI],
    ];
    base.iter().map(|g| Vector::from_iterator(3, g.iter().map(|v| v * scale))).collect()
}

fn control_heisenberg_run(params: &Params<'_>) -> Result<Output, CliError> {
    let a = params.float("a")?;
    let horizon = params.positive("T")?;
    let n_steps: usize = params.parse("N")?;
    if n_steps == 0 {
        return Err(CliError::config(Some("N"), "must be at least 1"));
    }
    let geometry: Geometry = parse_key(params, "geometry")?;
    let target = match params.raw("target") {
        "x" => Vector::from_vec(vec![a, 0.0, 0.0]),
        "z" => Vector::from_vec(vec![0.0, 0.0, a]),
        other => return Err(CliError::config(Some("target"), format!("expected x or z, got `{other}`"))),
    };
    let segments: usize = params.parse("segments")?;
    let count: usize = params.parse("perturbations")?;
    let amplitude = params.positive("amplitude")?;
    let probes: usize = params.parse("probes")?;
    let seed: u64 = params.parse("seed")?;
    let guesses = match params.list("p0_guess")? {
        Some(v) if v.len() == 3 => vec![Vector::from_vec(v)],
        Some(v) => return Err(CliError::config(Some("p0_guess"), format!("needs 3 values, got {}", v.len()))),
        None => costate_guesses(&target, horizon),
    };

    let problem = HeisenbergProblem;
    let x0 = Vector::zeros(3);
    let opts = ShootingOptions { segments, ..ShootingOptions::default() };
    let mut last_err = None;
    let mut solved = None;
    for guess in &guesses {
        match shoot(&problem, geometry, &x0, &target, horizon, n_steps, guess, &opts) {
            Ok(found) => {
                solved = Some(found);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (solution, report) = match solved {
        Some(s) => s,
        None => return Err(last_err.expect("at least one guess").into()),
    };

    let terminal_gap = (solution.xs.last().expect("non-empty") - &target).amax();
    let initial_gap = (&solution.xs[0] - &x0).amax();
    let perturbations = perturbation_check(
        &problem,
        &solution,
        &target,
        &PerturbationOptions { count, amplitude, seed, ..PerturbationOptions::default() },
    )?;
    let step_map = DmpStepMap { ocp: &problem, geometry, tau: solution.tau };
    let center = Vector::from_iterator(6, solution.xs[0].iter().chain(solution.ps[0].iter()).copied());
    let probe_points = sample_probes(&center, &Vector::from_element(6, 0.5), probes, seed);
    let defect = max_defect(&symplectic_defect(&step_map, &probe_points)?);

    let mut out = Output::default();
    out.note("geometry", geometry);
    out.note("target", params.raw("target"));
    out.note("shoot_iterations", report.iterations);
    out.note("p0", report.p0.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
    out.number("boundary_residual", terminal_gap.max(initial_gap));
    out.number("max_stationarity", solution.max_stationarity(&problem)?);
    out.number("dmp_residual", solution.residual(&problem)?.amax());
    out.number("cost", solution.cost(&problem)?);
    out.note("perturbations_feasible", perturbations.costs.len());
    out.note("perturbations_not_better", perturbations.not_better_count());
    out.note("perturbations_infeasible", perturbations.infeasible);
    out.number("perturbation_min_margin", perturbations.min_margin());
    out.number("max_symplectic_defect", defect);
    out.tables.push(("control.csv", solution.to_csv(&problem)?));
    Ok(out)
}

fn defect_sweep_run(params: &Params<'_>) -> Result<Output, CliError> {
    let kind: SystemKind = parse_key(params, "system")?;
    let tau = params.positive("tau")?;
    let count: usize = params.parse("probes")?;
    let half_width = params.positive("half_width")?;
    let seed: u64 = params.parse("seed")?;
    let sys = kind.build();
    let dim = 2 * sys.dof();
    let center = match params.list("center")? {
        None => default_state(kind).to_vector(),
        Some(v) if v.len() == dim => Vector::from_vec(v),
        Some(v) => return Err(CliError::config(Some("center"), format!("needs {dim} values, got {}", v.len()))),
    };
    let probes = sample_probes(&center, &Vector::from_element(dim, half_width), count, seed);
    let cfg = StepperConfig::new(tau);
    let scheme_key = params.raw("scheme");
    let reports = match ExtendedScheme::from_str(scheme_key) {
        Ok(ext) => extended_defect_reports(ext, &*sys, &probes, &cfg)?,
        Err(_) => {
            let scheme = scheme_of(params).map_err(|_| {
                let valid: Vec<&str> = Scheme::KEYS.iter().chain(ExtendedScheme::KEYS.iter()).copied().collect();
                CliError::config(Some("scheme"), format!("unknown scheme `{scheme_key}`; valid: {}", valid.join(", ")))
            })?;
            symplectic_defect(&SchemeMap::new(scheme, &*sys, cfg), &probes)?
        }
    };
    let mut out = Output::default();
    out.note("system", kind);
    out.note("scheme", scheme_key);
    out.note("probes", count);
    out.number("max_defect", max_defect(&reports));
    let table = if reports.is_empty() {
        let mut header = vec!["probe".to_string()];
        header.extend(indexed_columns("z", dim));
        header.extend(["defect".to_string(), "method".to_string()]);
        CsvTable::new(header)
    } else {
        defect_reports_csv(&reports)
    };
    out.tables.push(("defects.csv", table));
    Ok(out)
}
