use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig};
use super::plan::{partition_config, plan, PlannedRun, RunSpec};
use crate::federation::run_federation_with;
use crate::metrics::{convergence_check, write_rounds_csv, FairnessSummary, RoundLog};
use crate::models::ParamSet;
use crate::partition::{dirichlet_partition, ClientPartition, PartitionManifest, SkewReport};
use crate::textdata::{generate_synthetic, load_csv, Dataset};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Contents of `<run-id>/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    /// Position in sweep order; orders report rows.
    pub index: usize,
    pub spec: RunSpec,
    pub status: RunStatus,
    pub error: Option<String>,
    pub rounds_completed: usize,
    pub final_summary: Option<FairnessSummary>,
    pub converged: bool,
    pub avg_series: Vec<f64>,
    pub worst_series: Vec<f64>,
    pub gap_series: Vec<f64>,
    pub skew: Option<SkewReport>,
    pub wall_time_secs: f64,
}

impl RunSummary {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads shared by runs and their clients.
    pub jobs: usize,
    /// Print one line per finished run to stderr.
    pub verbose: bool,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic(s) => generate_synthetic(s),
        DatasetSpec::Csv(c) => load_csv(&c.train, &c.test, &c.schema),
    }
}

/// Applies the `--seed` and `--rounds` command-line overrides. A rounds
/// override also replaces every per-alpha override.
pub fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, rounds: Option<usize>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = rounds {
        cfg.federation.rounds = t;
        cfg.federation.round_overrides.clear();
    }
}

pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".fedskew-write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// [`execute_sweep`] followed by [`super::emit_report`].
pub fn run_experiments(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<RunSummary>> {
    let summaries = execute_sweep(cfg, opts)?;
    super::report::emit_report(&summaries, &opts.out_dir)?;
    Ok(summaries)
}

/// Runs every cell of the sweep, writes per-run artifacts and returns
/// summaries in sweep order. Failed runs are recorded, not raised; only
/// setup problems (config, dataset, output directory) return `Err`.
pub fn execute_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let runs = plan(cfg)?;
    ensure_writable(&opts.out_dir)?;
    let dataset = load_dataset(&cfg.dataset)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;

    let summaries = pool.install(|| {
        // shared by every run at the same alpha
        let partitions: Vec<Result<Vec<ClientPartition>>> = cfg
            .partition
            .alphas
            .par_iter()
            .map(|&a| dirichlet_partition(&dataset, &partition_config(cfg, a)))
            .collect();
        let inits: Vec<Result<ParamSet>> = cfg
            .models
            .par_iter()
            .map(|m| m.model.resolved(cfg.num_classes()).initialize(&dataset, cfg.seed))
            .collect();
        let per_alpha = runs.len() / cfg.partition.alphas.len();
        let per_model = per_alpha / cfg.models.len();
        runs.par_iter()
            .map(|run| {
                let parts = &partitions[run.index / per_alpha];
                let init = &inits[(run.index % per_alpha) / per_model];
                let summary = execute_run(run, &dataset, parts, init, &opts.out_dir);
                if opts.verbose {
                    match &summary.error {
                        None => eprintln!("run {} ({}) done", run.run_id, describe(&run.spec)),
                        Some(e) => eprintln!("run {} ({}) failed: {e}", run.run_id, describe(&run.spec)),
                    }
                }
                summary
            })
            .collect::<Vec<_>>()
    });
    Ok(summaries)
}

fn describe(spec: &RunSpec) -> String {
    let agg = match spec.aggregator.beta() {
        None => "fedavg".to_owned(),
        Some(b) => format!("fedavgw beta={b}"),
    };
    format!("alpha={} {} {agg}", spec.partition.alpha, spec.model_label)
}

fn execute_run(
    run: &PlannedRun,
    dataset: &Dataset,
    partitions: &Result<Vec<ClientPartition>>,
    init: &Result<ParamSet>,
    out_dir: &Path,
) -> RunSummary {
    let start = Instant::now();
    let dir = out_dir.join(&run.run_id);
    let mut logs: Vec<RoundLog> = Vec::new();
    let mut skew = None;
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| -> Result<()> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let parts = partitions.as_ref().map_err(|e| Error::Contract(format!("partitioning failed: {e}")))?;
        let manifest = PartitionManifest::new(&run.spec.partition, dataset.num_classes, parts.clone());
        skew = Some(manifest.report.clone());
        manifest.save(&dir.join("partition.json"))?;
        let init = init
            .as_ref()
            .map_err(|e| Error::Contract(format!("model initialization failed: {e}")))?;
        let mut fed = run.spec.fed_config();
        if run.spec.checkpoints {
            fed.checkpoint_dir = Some(dir.join("checkpoints"));
        }
        let result = run_federation_with(dataset, parts, &run.spec.model, &fed, init.clone(), |log| {
            logs.push(log.clone())
        });
        write_rounds_csv(&dir.join("rounds.csv"), &logs)?;
        result.map(|_| ())
    }));
    let error = match outcome {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(payload) => Some(panic_message(&payload)),
    };
    let m = &run.spec.metrics;
    let summary = RunSummary {
        run_id: run.run_id.clone(),
        index: run.index,
        spec: run.spec.clone(),
        status: if error.is_none() { RunStatus::Completed } else { RunStatus::Failed },
        error,
        rounds_completed: logs.len(),
        final_summary: logs.last().map(|l| l.summary.clone()),
        converged: convergence_check(&logs, m.convergence_window, m.convergence_tolerance),
        avg_series: logs.iter().map(|l| l.summary.avg).collect(),
        worst_series: logs.iter().map(|l| l.summary.worst).collect(),
        gap_series: logs.iter().map(|l| l.summary.gap).collect(),
        skew,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    write_summary(&summary, &dir);
    summary
}

fn write_summary(summary: &RunSummary, dir: &Path) {
    let path = dir.join("summary.json");
    let written = std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .and_then(|_| Ok(serde_json::to_string_pretty(summary)?))
        .and_then(|text| std::fs::write(&path, text).map_err(|e| Error::io(&path, e)));
    if let Err(e) = written {
        eprintln!("run {}: could not write summary: {e}", summary.run_id);
    }
}

fn panic_message(payload: &Box<dyn std::any::Any + Send>) -> String {
    let msg = payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".to_owned());
    format!("panicked: {msg}")
}

/// Partitions every alpha and writes `partitions/alpha-<a>.json` manifests
/// without training anything.
pub fn partition_only(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(f64, PartitionManifest)>> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset)?;
    let dir = out_dir.join("partitions");
    ensure_writable(&dir)?;
    let mut out = Vec::new();
    for &alpha in &cfg.partition.alphas {
        let pc = partition_config(cfg, alpha);
        let clients = dirichlet_partition(&dataset, &pc)?;
        let manifest = PartitionManifest::new(&pc, dataset.num_classes, clients);
        manifest.save(&dir.join(format!("alpha-{alpha}.json")))?;
        out.push((alpha, manifest));
    }
    Ok(out)
}
