//! Command-line entry point.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::checks::{gradcheck_suite, oracle_suite};
use super::config::load_config;
use super::output::{read_csv, write_csv, write_loss_tables};
use super::plot::render_svg;
use super::runner::{run_experiment, ExperimentResult};
use super::HarnessError;

#[derive(Debug, Parser)]
#[command(name = "metabound", about = "Information-theoretic generalization bounds for noisy meta-learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every experiment in a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        nets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Brute-force checks of the MI estimators and KL inversion.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw bounds and gap versus m from a results CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const GRAD_TOL: f64 = 1e-5;

fn run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, jobs: Option<usize>) -> Result<(), HarnessError> {
    let mut configs = load_config(&config)?;
    for cfg in &mut configs {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = &out {
            cfg.out_dir = o.clone();
        }
    }
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let out_dir = configs[0].out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let mut results: Vec<ExperimentResult> = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let res = run_experiment(cfg, jobs)?;
        println!("[{}] n={} m={}", cfg.config_hash(), cfg.n, cfg.m);
        print!("{}", res.report);
        let tables_path = out_dir.join(format!("loss_tables_{}.txt", cfg.config_hash()));
        write_loss_tables(res.tables(), &tables_path)?;
        results.push(res);
    }
    let csv = out_dir.join("results.csv");
    write_csv(&results, &csv)?;
    println!("wrote {}", csv.display());
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns 0 on success, 1 on runtime failure and 2 on usage errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Run { config, seed, out, jobs } => run(config, seed, out, jobs),
        Command::Gradcheck { nets, seed } => match gradcheck_suite(nets, seed) {
            Ok(worst) => {
                println!("gradcheck: {nets} networks, max relative error {worst:.3e}");
                if worst <= GRAD_TOL {
                    Ok(())
                } else {
                    Err(HarnessError::Check(format!("gradient error {worst:.3e} exceeds {GRAD_TOL:.0e}")))
                }
            }
            Err(e) => Err(e.into()),
        },
        Command::Oracle { seed } => match oracle_suite(100, 1000, seed) {
            Ok(s) => {
                println!(
                    "mi forms: {} joints, max |kl - entropy| = {:.3e}, range violations = {}",
                    s.joints, s.max_form_diff, s.range_violations
                );
                println!(
                    "kl inversion: {} round trips, max error = {:.3e}",
                    s.inversions, s.max_inversion_err
                );
                if s.max_form_diff <= 1e-12 && s.range_violations == 0 && s.max_inversion_err <= 1e-9 {
                    Ok(())
                } else {
                    Err(HarnessError::Check("oracle tolerance exceeded".into()))
                }
            }
            Err(e) => Err(e.into()),
        },
        Command::Plot { csv, out } => read_csv(&csv).and_then(|rows| {
            fs::write(&out, render_svg(&rows)).map_err(|source| HarnessError::Io { path: out.clone(), source })?;
            println!("wrote {}", out.display());
            Ok(())
        }),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
