//! Experiment keys, descriptions and default parameters.

/// One runnable experiment.
pub struct ExperimentSpec {
    pub key: &'static str,
    /// Which published result the experiment reproduces.
    pub anchor: &'static str,
    pub summary: &'static str,
    pub defaults: &'static [(&'static str, &'static str)],
}

pub const EXPERIMENTS: &[ExperimentSpec] = &[
    ExperimentSpec {
        key: "integrate",
        anchor: "energy exactness of the midpoint rule for linear systems",
        summary: "integrate a catalog system with one scheme; writes trajectory.csv and energy_error.csv",
        defaults: &[
            ("system", "harmonic"),
            ("scheme", "midpoint"),
            ("beta", "0.25"),
            ("tau", "0.01"),
            ("T", "100"),
            ("n_steps", "auto"),
            ("q0", "auto"),
            ("p0", "auto"),
        ],
    },
    ExperimentSpec {
        key: "exactness",
        anchor: "generating-function exactness: harmonic-oscillator panels and the J2/J3 orbit at T = 10π",
        summary: "generating-function exactness defect along an STM sweep; writes exactness.csv",
        defaults: &[
            ("system", "harmonic"),
            ("scheme", "midpoint"),
            ("tau", "0.01"),
            ("T", "auto"),
            ("mask", "1e3"),
            ("q0", "auto"),
            ("p0", "auto"),
        ],
    },
    ExperimentSpec {
        key: "energy-conserving",
        anchor: "symplectic-energy conserving schemes on the extended phase space",
        summary: "extended Störmer or midpoint with adaptive physical step; writes extended_trajectory.csv",
        defaults: &[
            ("system", "harmonic"),
            ("scheme", "extended-midpoint"),
            ("tau", "0.01"),
            ("n_steps", "1000"),
            ("q0", "auto"),
            ("p0", "auto"),
        ],
    },
    ExperimentSpec {
        key: "dct-energy",
        anchor: "double-well energy error before and after a time-dependent rotation",
        summary: "energy error of a midpoint run in original and rotated coordinates; writes dct_energy.csv",
        defaults: &[
            ("system", "double-well"),
            ("tau", "0.01"),
            ("n_steps", "10000"),
            ("theta", "auto"),
            ("q0", "auto"),
            ("p0", "auto"),
        ],
    },
    ExperimentSpec {
        key: "control-heisenberg",
        anchor: "Heisenberg optimal control example",
        summary: "shooting on the reduced optimality flow with checks; writes control.csv",
        defaults: &[
            ("a", "1"),
            ("T", "1"),
            ("N", "100"),
            ("geometry", "midpoint"),
            ("target", "x"),
            ("segments", "1"),
            ("p0_guess", "auto"),
            ("perturbations", "200"),
            ("amplitude", "0.01"),
            ("probes", "50"),
            ("seed", "7"),
        ],
    },
    ExperimentSpec {
        key: "defect-sweep",
        anchor: "symplecticity of the one-step maps",
        summary: "symplectic defect of one step at random probes; writes defects.csv",
        defaults: &[
            ("system", "double-well"),
            ("scheme", "midpoint"),
            ("beta", "0.25"),
            ("tau", "0.01"),
            ("probes", "50"),
            ("half_width", "0.5"),
            ("center", "auto"),
            ("seed", "42"),
        ],
    },
];

pub fn find(key: &str) -> Option<&'static ExperimentSpec> {
    EXPERIMENTS.iter().find(|e| e.key == key)
}

pub fn keys() -> Vec<&'static str> {
    EXPERIMENTS.iter().map(|e| e.key).collect()
}

/// Text printed by `--list`.
pub fn list_experiments() -> String {
    let mut out = String::new();
    for spec in EXPERIMENTS {
        out.push_str(&format!("{}\n  {}\n  reproduces: {}\n  defaults:\n", spec.key, spec.summary, spec.anchor));
        for (k, v) in spec.defaults {
            out.push_str(&format!("    {k} = {v}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_mentions_every_key() {
        let text = list_experiments();
        for key in keys() {
            assert!(text.contains(key));
        }
        assert!(text.contains("harmonic-oscillator panels"));
    }
}
