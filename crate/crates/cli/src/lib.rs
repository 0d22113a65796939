//! Experiment runner for the `geoint` command.
//!
//! A run reads a flat `key = value` configuration, executes one named
//! experiment and writes CSV tables plus `summary.txt` into the output
//! directory.

pub mod catalog;
pub mod config;
pub mod error;
pub mod experiments;

use std::path::{Path, PathBuf};

use clap::Parser;

pub use config::{Config, Params};
pub use error::CliError;

#[derive(Debug, Clone, Parser)]
#[command(name = "geoint", about = "Run geometric-integration experiments and write CSV output")]
pub struct CliArgs {
    /// Configuration file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Experiment key; overrides `experiment` in the configuration.
    #[arg(long)]
    pub experiment: Option<String>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Print the experiment catalog and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub experiment: &'static str,
    pub files: Vec<PathBuf>,
    pub summary: Vec<(String, String)>,
}

impl RunOutcome {
    pub fn summary_text(&self) -> String {
        let mut text = format!("experiment = {}\n", self.experiment);
        for (k, v) in &self.summary {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text
    }
}

/// Runs the experiment selected by `config` (or `experiment_override`) and
/// writes its artifacts to `out_dir`.
pub fn run_config(config: &Config, experiment_override: Option<&str>, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let key = experiment_override.or_else(|| config.get("experiment")).ok_or_else(|| {
        CliError::config(Some("experiment"), format!("no experiment selected; valid: {}", catalog::keys().join(", ")))
    })?;
    let spec = catalog::find(key).ok_or_else(|| {
        CliError::config(Some("experiment"), format!("unknown experiment `{key}`; valid: {}", catalog::keys().join(", ")))
    })?;
    let params = Params::new(config, spec.defaults)?;
    let output = experiments::run_experiment(spec.key, &params)?;

    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for (name, table) in &output.tables {
        let path = out_dir.join(name);
        table.write_to(&path)?;
        files.push(path);
    }
    let outcome = RunOutcome { experiment: spec.key, files, summary: output.summary };
    let summary_path = out_dir.join("summary.txt");
    std::fs::write(&summary_path, outcome.summary_text())?;
    let mut outcome = outcome;
    outcome.files.push(summary_path);
    Ok(outcome)
}

pub fn run(args: &CliArgs) -> Result<RunOutcome, CliError> {
    let config = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    run_config(&config, args.experiment.as_deref(), &args.out)
}
