use std::fs;
use std::path::Path;
use std::process::Command;

use geoint_cli::{catalog, run_config, Config};

fn geoint(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_geoint")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn list_names_every_experiment() {
    let out = geoint(&["--list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("exactness"));
    assert!(text.contains("harmonic-oscillator panels"));
    for key in catalog::keys() {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn every_experiment_runs_with_defaults() {
    for key in catalog::keys() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_config(&Config::default(), Some(key), dir.path()).unwrap_or_else(|e| panic!("{key}: {e}"));
        assert!(outcome.files.iter().all(|f| f.exists()), "{key}");
    }
}

#[test]
fn harmonic_midpoint_energy_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = integrate\nsystem = harmonic\nscheme = midpoint\ntau = 0.01\nT = 100\n");
    let out_dir = dir.path().join("out");
    let out = geoint(&["--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let errors = column(&fs::read_to_string(out_dir.join("energy_error.csv")).unwrap(), "energy_error");
    assert_eq!(errors.len(), 10_001);
    assert!(errors.iter().all(|e| e.abs() <= 1e-12));
}

#[test]
fn rotation_leaves_energy_error_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = dct-energy\nn_steps = 2000\n");
    let out_dir = dir.path().join("out");
    assert!(geoint(&["--config", &cfg, "--out", out_dir.to_str().unwrap()]).status.success());
    let diff = column(&fs::read_to_string(out_dir.join("dct_energy.csv")).unwrap(), "abs_difference");
    assert_eq!(diff.len(), 2001);
    assert!(diff.iter().all(|d| *d <= 1e-12));
}

#[test]
fn empty_run_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = integrate\nn_steps = 0\n");
    let out_dir = dir.path().join("out");
    let out = geoint(&["--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["trajectory.csv", "energy_error.csv"] {
        let text = fs::read_to_string(out_dir.join(name)).unwrap();
        assert_eq!(text.lines().count(), 1, "{name}");
    }
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = integrate\nstep_size = 0.1\n");
    let out = geoint(&["--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("step_size") && err.contains("tau") && err.contains("n_steps"), "{err}");
}

#[test]
fn invalid_values_point_at_their_key() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [
        ("experiment = integrate\ntau = -0.1\n", "tau"),
        ("experiment = integrate\nscheme = leapfrog\n", "scheme"),
        ("experiment = integrate\nq0 = 1, 2\n", "q0"),
        ("experiment = nonsense\n", "experiment"),
    ] {
        let cfg = write_config(dir.path(), text);
        let out = geoint(&["--config", &cfg, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(String::from_utf8(out.stderr).unwrap().contains(key), "{text}");
    }
    assert_eq!(geoint(&["--out", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn experiment_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = integrate\nprobes = 3\n");
    let out_dir = dir.path().join("out");
    let out = geoint(&["--config", &cfg, "--experiment", "defect-sweep", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(out_dir.join("defects.csv")).unwrap().lines().count(), 4);
}

#[test]
fn solver_failure_reports_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = integrate\nsystem = earth-j2j3\nscheme = rk4\nq0 = 0, 0, 0\nT = 1\n");
    let out = geoint(&["--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("step 1"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let configs = [
        "experiment = defect-sweep\nscheme = newmark\nprobes = 10\n",
        "experiment = integrate\nsystem = double-well\nscheme = verlet\nT = 5\n",
        "experiment = control-heisenberg\nN = 20\nperturbations = 5\nprobes = 4\n",
        "experiment = energy-conserving\nscheme = extended-stormer\nn_steps = 50\n",
    ];
    for text in configs {
        let config = Config::parse(text).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run_config(&config, None, a.path()).unwrap();
        run_config(&config, None, b.path()).unwrap();
        for file in &first.files {
            let name = file.file_name().unwrap();
            assert_eq!(fs::read(file).unwrap(), fs::read(b.path().join(name)).unwrap(), "{text}");
        }
    }
}
