//! Declarative sweeps: JSON config, run planning, per-run artifacts and the
//! markdown report. [`main`] is the `fedskew` command line.
//!
//! Output layout under the output root:
//!
//! ```text
//! <run-id>/rounds.csv       per-round, per-client accuracies
//! <run-id>/summary.json     RunSummary
//! <run-id>/partition.json   PartitionManifest
//! report.md
//! gap_vs_alpha.csv          alpha,model,aggregator,beta,avg,worst,gap
//! gap_reduction.csv
//! fedavgw_comparison.csv
//! ```

mod config;
mod plan;
mod report;
mod runner;

pub use config::{
    AggregatorSpec, CsvSpec, DatasetSpec, ExperimentConfig, FederationSweep, MetricsConfig, ModelSpec,
    PartitionSweep, RoundOverride, OUT_ENV,
};
pub use plan::{partition_config, plan, PlannedRun, RunSpec};
pub use report::{
    emit_report, fedavgw_comparisons, format_ratio, gap_reductions, load_summaries, reduction_ratio,
    render_report, FedAvgWComparison, GapReduction, ReportFiles, ReportRow, GAP_CSV_HEADER, ZERO_GAP,
};
pub use runner::{
    apply_overrides, ensure_writable, execute_sweep, load_dataset, partition_only, run_experiments, RunOptions,
    RunStatus, RunSummary,
};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUN_FAILED: i32 = 2;
pub const EXIT_SELFTEST_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fedskew", version, about = "Federated fairness sweeps under Dirichlet label skew")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for runs and clients.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Replace the config's experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace every round count (smoke runs).
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Output root; defaults to the config's `output_dir`, then $FEDSKEW_OUT, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every cell of the sweep and write the report.
    Run { config: PathBuf },
    /// Partition every alpha and write manifests without training.
    Partition { config: PathBuf },
    /// Rebuild report.md and the CSVs from existing summaries.
    Report { out_dir: PathBuf },
    /// Run the built-in invariant checks.
    Selftest,
}

/// Parses `args` (program name first) and returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run { ref config } => cmd_run(&cli, config),
        Command::Partition { ref config } => cmd_partition(&cli, config),
        Command::Report { ref out_dir } => cmd_report(out_dir),
        Command::Selftest => cmd_selftest(),
    }
}

fn load_config(cli: &Cli, path: &std::path::Path) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    apply_overrides(&mut cfg, cli.seed, cli.rounds);
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.default_output_dir());
    Ok((cfg, out))
}

fn cmd_run(cli: &Cli, config: &std::path::Path) -> i32 {
    let (cfg, out_dir) = match load_config(cli, config) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let opts = RunOptions {
        out_dir: out_dir.clone(),
        jobs: cli.jobs,
        verbose: true,
    };
    let summaries = match execute_sweep(&cfg, &opts) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = emit_report(&summaries, &out_dir) {
        eprintln!("error: writing the report: {e}");
        return EXIT_RUN_FAILED;
    }
    let failed = summaries.iter().filter(|s| !s.completed()).count();
    println!(
        "{} runs, {failed} failed; report at {}",
        summaries.len(),
        out_dir.join("report.md").display()
    );
    if failed > 0 {
        EXIT_RUN_FAILED
    } else {
        EXIT_OK
    }
}

fn cmd_partition(cli: &Cli, config: &std::path::Path) -> i32 {
    let (cfg, out_dir) = match load_config(cli, config) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match partition_only(&cfg, &out_dir) {
        Ok(manifests) => {
            for (alpha, m) in manifests {
                let r = &m.report;
                let ratio = r.ratio.map_or("inf".to_owned(), |x| format!("{x:.1}"));
                println!("alpha {alpha}: sizes {:?} min {} max {} ratio {ratio}", r.sizes, r.min, r.max);
            }
            EXIT_OK
        }
        Err(e @ Error::RedrawBudgetExhausted { .. }) => {
            eprintln!("error: {e}");
            EXIT_RUN_FAILED
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn cmd_report(out_dir: &std::path::Path) -> i32 {
    let summaries = match load_summaries(out_dir) {
        Ok(s) if !s.is_empty() => s,
        Ok(_) => {
            eprintln!("error: no */summary.json under {}", out_dir.display());
            return EXIT_CONFIG;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match emit_report(&summaries, out_dir) {
        Ok(files) => {
            println!("wrote {}", files.report_md.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUN_FAILED
        }
    }
}

fn cmd_selftest() -> i32 {
    let outcomes = crate::selftest::run_all();
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {} ({:.1}s): {}", o.name, o.secs, o.detail);
    }
    if outcomes.iter().all(|o| o.passed) {
        EXIT_OK
    } else {
        EXIT_SELFTEST_FAILED
    }
}
