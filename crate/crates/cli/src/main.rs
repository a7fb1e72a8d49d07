use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use simfed_core::config::{parse_config, Overrides};
use simfed_core::experiments::{all_passed, run_config, run_preset, Check, Preset, PresetOptions};
use simfed_core::{Algo, ExecMode, SimError};

const EXIT_USAGE: u8 = 1;
const EXIT_STRICT: u8 = 3;

/// Federated ensemble simulator.
///
/// Set SIMFED_THREADS to cap the number of worker threads.
#[derive(Debug, Parser)]
#[command(name = "simfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration and write metrics, summary and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// fed_ensemble, fedavg or fedprox.
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long)]
        k: Option<usize>,
        /// Number of ages T.
        #[arg(long)]
        ages: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 3 unless every mode's training loss decreased.
        #[arg(long)]
        strict: bool,
    },
    /// Run a named experiment preset.
    Preset {
        /// One of table1_biasvar, theorem2_oracle, noc_sweep, decay_check, surface_fig.
        name: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit with status 3 if any of the preset's checks fail.
        #[arg(long)]
        strict: bool,
    },
}

fn init_threads() -> Result<(), SimError> {
    let Ok(raw) = std::env::var("SIMFED_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| SimError::config("SIMFED_THREADS", format!("expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| SimError::config("SIMFED_THREADS", e.to_string()))
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn execute(cmd: Command) -> Result<bool, SimError> {
    init_threads()?;
    match cmd {
        Command::Run {
            config,
            algo,
            k,
            ages,
            seed,
            out,
            strict,
        } => {
            let overrides = Overrides { algo, k, ages, seed, out };
            let cfg = parse_config(Some(&config), &overrides)?;
            let outcome = run_config(&cfg)?;
            for m in &outcome.summary {
                println!(
                    "mode {}: train loss {:.4e} -> {:.4e}{}",
                    m.mode,
                    m.initial_train_loss,
                    m.final_train_loss,
                    m.test_accuracy.map(|a| format!(", test accuracy {a:.4}")).unwrap_or_default()
                );
            }
            if let Some(a) = outcome.ensemble_test_accuracy {
                println!("ensemble test accuracy {a:.4}");
            }
            println!("wrote {}", outcome.dir.display());
            if strict {
                print_checks(&outcome.checks);
            }
            Ok(!strict || all_passed(&outcome.checks))
        }
        Command::Preset { name, out, seed, strict } => {
            let opts = PresetOptions {
                out,
                seed,
                exec: ExecMode::Parallel,
            };
            let outcome = run_preset(name, &opts)?;
            print_checks(&outcome.checks);
            println!("wrote {}", outcome.dir.display());
            Ok(!strict || all_passed(&outcome.checks))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_STRICT),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
