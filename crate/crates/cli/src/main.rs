use clap::{Parser, Subcommand};
use rora_cli::error::CliError;
use rora_core::grad::{gradcheck, GRADCHECK_REL_TOL};
use rora_core::linalg::RngSeed;
use std::path::PathBuf;
use std::process::ExitCode;

/// Numerical laboratory for low-rank adapter scaling rules.
#[derive(Parser)]
#[command(name = "rora-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        /// Path to the run configuration.
        config: PathBuf,
        /// Directory for results.csv, config_echo.toml and summary.txt.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Worker threads; results are identical for any count.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Summarize a results.csv produced by `run`.
    Summarize {
        results: PathBuf,
        /// Emit machine-readable JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Check analytic adapter gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out_dir,
            workers,
        } => {
            rora_cli::run_config_file(&config, &out_dir, workers)?;
            eprintln!("wrote {}", out_dir.join("results.csv").display());
            Ok(())
        }
        Command::Summarize { results, json } => {
            let text = rora_cli::summarize_file(&results, json)?;
            print!("{text}");
            Ok(())
        }
        Command::Gradcheck { trials, seed } => {
            let report = gradcheck(trials, RngSeed(seed)).map_err(CliError::from)?;
            println!(
                "gradcheck: trials={} failures={} max_rel_error={:.3e}",
                report.trials, report.failures, report.max_rel_error
            );
            if report.failures > 0 || report.max_rel_error >= GRADCHECK_REL_TOL {
                return Err(CliError::Numeric(format!(
                    "gradient check failed on {} parameters",
                    report.failures
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap already formats usage errors; map them to the validation
            // exit code
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
