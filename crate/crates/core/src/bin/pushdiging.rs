use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pushdiging::harness::{
    audit_experiment, certificate_for, check_graph, load_config_file, run_experiment, sweep_step_sizes, HarnessError,
    RunOutcome,
};

#[derive(Parser)]
#[command(name = "pushdiging", version, about = "Push-DIGing experiments and rate certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured algorithms and write traces and summaries.
    Run { config: PathBuf },
    /// Re-run Push-DIGing with the step-sizes scaled by each value.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        scales: Vec<f64>,
    },
    /// Print the rate certificate for the configured step-sizes.
    Certify { config: PathBuf },
    /// Run Push-DIGing and audit the gain cycle along its trajectory.
    Audit { config: PathBuf },
    /// Verify the connectivity window over the horizon.
    CheckGraph { config: PathBuf },
}

fn dispatch(cmd: Command) -> Result<bool, HarnessError> {
    match cmd {
        Command::Run { config } => {
            let cfg = load_config_file(&config)?;
            let bundle = run_experiment(&cfg)?;
            print!("{}", bundle.summary.render());
            for run in &bundle.runs {
                match &run.outcome {
                    RunOutcome::Diverged { k, reason } => eprintln!("diverged at iteration {k}: {reason}"),
                    RunOutcome::Failed { reason } => eprintln!("failed: {reason}"),
                    RunOutcome::Completed { .. } => {}
                }
            }
            Ok(bundle.all_ok())
        }
        Command::Sweep { config, scales } => {
            let cfg = load_config_file(&config)?;
            let report = sweep_step_sizes(&cfg, &scales, &cfg.output_dir().join("sweep"))?;
            print!("{}", report.report().render());
            Ok(report.entries.iter().all(|e| e.outcome.is_ok()))
        }
        Command::Certify { config } => {
            let cfg = load_config_file(&config)?;
            let cert = certificate_for(&cfg)?;
            print!("{}", cert.report().render());
            Ok(cert.is_valid())
        }
        Command::Audit { config } => {
            let cfg = load_config_file(&config)?;
            let audit = audit_experiment(&cfg, &cfg.output_dir())?;
            print!("{}", audit.report.render());
            Ok(audit.passed())
        }
        Command::CheckGraph { config } => {
            let cfg = load_config_file(&config)?;
            let report = check_graph(&cfg)?;
            println!("b0 = {}", report.b0);
            println!("horizon = {}", report.horizon);
            println!("mode = {}", report.mode);
            println!("windows_checked = {}", report.windows_checked);
            match report.first_failing_window {
                Some(w) => println!("first_failing_window = {w}\nstatus = FAIL"),
                None => println!("status = PASS"),
            }
            Ok(report.holds())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
