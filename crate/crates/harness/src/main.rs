use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hcef_harness::config::parse_config;
use hcef_harness::experiment::{resolve_run_dir, run_experiment};
use hcef_harness::oracle::run_oracle;
use hcef_harness::plotdata::plot_run_dir;
use hcef_harness::HarnessError;

#[derive(Parser)]
#[command(name = "hcef", version, about = "Cooperative federated edge learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment spec.
    Run {
        config: PathBuf,
        /// Overrides the output root (also settable via HCEF_OUTPUT_ROOT).
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Compare the controller with a brute-force grid on random instances.
    Oracle { config: PathBuf },
    /// Write long-format plot data for a finished run directory.
    Plotdata { run_dir: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILED: u8 = 3;

fn exit_for(err: &HarnessError) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        HarnessError::Config(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output_root } => {
            let spec = match parse_config(&config) {
                Ok(s) => s,
                Err(e) => return exit_for(&e),
            };
            let run_dir = match output_root {
                Some(root) => root.join(&spec.name),
                None => resolve_run_dir(&spec),
            };
            match run_experiment(&spec, &run_dir) {
                Ok(report) => {
                    println!("{} runs written to {}", report.runs, report.run_dir.display());
                    for row in &report.summary {
                        let time = row.median_time_to_target.map_or("-".to_string(), |t| format!("{t:.0}"));
                        let energy = row.median_energy_to_target.map_or("-".to_string(), |e| format!("{e:.0}"));
                        println!(
                            "{:<32} reached {}/{}  median time {time}  energy {energy}  final loss {:.4}",
                            row.cell, row.reached, row.runs, row.median_final_loss
                        );
                    }
                    if report.failures.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for (run, err) in &report.failures {
                            eprintln!("failed: {run}: {err}");
                        }
                        ExitCode::from(EXIT_FAILED)
                    }
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::Oracle { config } => {
            let spec = match parse_config(&config) {
                Ok(s) => s,
                Err(e) => return exit_for(&e),
            };
            match run_oracle(&spec.oracle, &spec.base.solver) {
                Ok(report) => {
                    println!(
                        "{}/{} instances within {} of the grid optimum; monotone: {}; feasibility verified: {}",
                        report.within_tolerance,
                        report.outcomes.len(),
                        spec.oracle.tolerance,
                        report.all_monotone,
                        report.all_feasibility_verified
                    );
                    if report.passed { ExitCode::SUCCESS } else { ExitCode::from(EXIT_FAILED) }
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::Plotdata { run_dir } => match plot_run_dir(&run_dir) {
            Ok(path) => {
                println!("{}", path.display());
                ExitCode::SUCCESS
            }
            Err(e) => exit_for(&e),
        },
    }
}
