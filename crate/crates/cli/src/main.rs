use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use geoint_cli::{catalog, run, CliArgs};

fn main() -> ExitCode {
    let args = CliArgs::parse();
    if args.list {
        // A closed pipe (e.g. `| head`) is not an error worth reporting.
        let _ = write!(std::io::stdout().lock(), "{}", catalog::list_experiments());
        return ExitCode::SUCCESS;
    }
    match run(&args) {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            let _ = write!(stdout, "{}", outcome.summary_text());
            for file in &outcome.files {
                let _ = writeln!(stdout, "wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("geoint: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
