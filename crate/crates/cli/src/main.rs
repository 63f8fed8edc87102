use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdlab_cli::oracle::{run_check, Check};
use sdlab_cli::{build_report, run, CliError, Manifest, RunOptions, EXIT_RUNTIME};

#[derive(Parser)]
#[command(name = "sdlab", version, about = "Self-distillation experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every model a manifest describes and write the report.
    Run {
        manifest: PathBuf,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Rebuild summary tables and plots from a run directory.
    Report { run_dir: PathBuf },
    /// Check a manifest without training anything.
    Validate { manifest: PathBuf },
    /// Compare analytic derivatives and curvature against oracles.
    Oracle {
        #[arg(value_parser = Check::NAMES)]
        check: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        trace_probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn execute(cmd: Command) -> Result<bool, CliError> {
    match cmd {
        Command::Run { manifest, force } => {
            let m = Manifest::load(&manifest)?;
            let (dir, report) = run(&m, RunOptions { force })?;
            print!("{}", report.accuracy_table());
            println!("run written to {}", dir.display());
            Ok(true)
        }
        Command::Report { run_dir } => {
            let report = build_report(&run_dir)?;
            print!("{}", report.accuracy_table());
            for f in &report.files {
                println!("wrote {}", run_dir.join(f).display());
            }
            Ok(true)
        }
        Command::Validate { manifest } => {
            let m = Manifest::load(&manifest)?;
            let issues = m.validate();
            if issues.is_empty() {
                println!("{}: ok", manifest.display());
                Ok(true)
            } else {
                Err(CliError::Validation(issues))
            }
        }
        Command::Oracle {
            check,
            trials,
            trace_probes,
            seed,
        } => {
            let check = Check::parse(&check).expect("clap restricts the names");
            let lines = run_check(check, trials, trace_probes, seed)?;
            for l in &lines {
                println!("{l}");
            }
            Ok(lines.iter().all(|l| l.passed))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
