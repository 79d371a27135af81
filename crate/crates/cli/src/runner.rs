//! Run execution and artifact management: seeded runs, parameter sweeps,
//! component ablations, and re-summarization of existing output trees.
//!
//! Layout under the output directory:
//!
//! ```text
//! <out>/
//!   summary.csv          one row per (cell, seed)
//!   summary_agg.csv      one row per cell, aggregated over seeds
//!   <cell>/seed_<s>/
//!     run.json           run id, cell, algorithm, seed, config digest
//!     metrics.csv        tabular metrics log
//!     summary_row.json   the run's summary row
//!     checkpoints/task_<t>.json
//!     replay/task_<t>.jsonl
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use stamp_core::fedsim::{assemble_client_tasks, run_experiment, Algorithm, RunOutput};
use stamp_core::proto::write_snapshot;
use stamp_core::taskpool::{build_task_streams, dirichlet_split, generate_synthetic, PartitionMode};
use stamp_core::tensor::ParamVector;
use stamp_core::{Error, Result};

use crate::config::{apply_param, ExperimentConfig, PartitionKind};
use crate::summary::{aggregate, write_aggregate_csv, write_summary_csv, SummaryRow};

/// Command-line overrides shared by the verbs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

/// `run.json`: identification stamped on every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub cell: String,
    pub algorithm: String,
    pub seed: u64,
    pub config_digest: String,
}

/// One checkpoint written at a task boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_digest: String,
    pub task_index: usize,
    pub global_theta: ParamVector,
    pub replay_snapshot: String,
}

/// Failure record left behind when a run dies mid-flight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub cell: String,
    pub seed: u64,
    pub error: String,
}

/// One unit of work: a named cell evaluated at one seed.
#[derive(Debug, Clone)]
struct CellJob {
    cfg: ExperimentConfig,
    cell: String,
    param: Option<(String, String)>,
    seed: u64,
}

fn cell_dir(out: &Path, cell: &str, seed: u64) -> PathBuf {
    out.join(cell).join(format!("seed_{seed}"))
}

/// Refuse to reuse a run directory stamped with a different configuration.
fn check_resume(dir: &Path, digest: &str) -> Result<()> {
    let manifest_path = dir.join("run.json");
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: RunManifest = serde_json::from_str(&text)?;
        if manifest.config_digest != digest {
            return Err(Error::Config(format!(
                "output directory {} holds artifacts of a different configuration \
                 (digest {} vs {}); refusing to resume",
                dir.display(),
                manifest.config_digest,
                digest
            )));
        }
    }
    Ok(())
}

/// Execute one run and write its artifacts. Returns the summary row.
fn execute_cell(job: &CellJob, out_root: &Path) -> Result<SummaryRow> {
    let cfg = &job.cfg;
    let seed = job.seed;
    let digest = cfg.digest()?;
    let run_id = cfg.run_id(seed)?;
    let dir = cell_dir(out_root, &job.cell, seed);
    check_resume(&dir, &digest)?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("replay"))?;

    let dataset = generate_synthetic(&cfg.dataset)?;
    let streams = build_task_streams(
        cfg.dataset.num_classes,
        cfg.tasks.classes_per_task,
        cfg.federation.num_clients,
        cfg.federation.num_tasks,
        seed,
        cfg.tasks.disjoint_across_clients,
    )?;
    let partition = match cfg.tasks.partition {
        PartitionKind::Shared => PartitionMode::Shared,
        PartitionKind::Dirichlet => PartitionMode::Dirichlet(dirichlet_split(
            &dataset,
            cfg.federation.num_clients,
            cfg.tasks.dirichlet_alpha,
            seed,
        )?),
    };
    let tasks = assemble_client_tasks(&dataset, &streams, &partition)?;
    let run_cfg = cfg.run_config(seed)?;
    let output = run_experiment(&run_cfg, &tasks, &run_id)?;

    write_artifacts(cfg, job, &dir, &run_id, &digest, &output)?;
    Ok(summary_row(cfg, job, &run_id, &output))
}

fn summary_row(cfg: &ExperimentConfig, job: &CellJob, run_id: &str, output: &RunOutput) -> SummaryRow {
    let algorithm = cfg
        .algorithm()
        .map(|a| a.label())
        .unwrap_or_else(|_| "invalid".into());
    SummaryRow {
        run_id: run_id.to_string(),
        cell: job.cell.clone(),
        algorithm,
        seed: job.seed,
        param: job.param.as_ref().map(|(name, _)| name.clone()),
        value: job
            .param
            .as_ref()
            .and_then(|(_, value)| value.parse().ok()),
        final_mean_accuracy_pct: output.summary.final_mean_accuracy * 100.0,
        averaged_forgetting_pct: output.summary.averaged_forgetting.map(|v| v * 100.0),
        mean_temporal_cosine: output.summary.mean_temporal_cosine,
        mean_spatial_cosine: output.summary.mean_spatial_cosine,
    }
}

fn write_artifacts(
    cfg: &ExperimentConfig,
    job: &CellJob,
    dir: &Path,
    run_id: &str,
    digest: &str,
    output: &RunOutput,
) -> Result<()> {
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        cell: job.cell.clone(),
        algorithm: cfg.algorithm()?.label(),
        seed: job.seed,
        config_digest: digest.to_string(),
    };
    fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut metrics = Vec::new();
    output.metrics.write_csv(&mut metrics)?;
    fs::write(dir.join("metrics.csv"), metrics)?;
    for boundary in &output.boundaries {
        let snapshot_name = format!("replay/task_{}.jsonl", boundary.task);
        let mut snapshot = Vec::new();
        write_snapshot(&boundary.replay, &mut snapshot)?;
        fs::write(dir.join(&snapshot_name), snapshot)?;
        let checkpoint = Checkpoint {
            config_digest: digest.to_string(),
            task_index: boundary.task,
            global_theta: boundary.params.clone(),
            replay_snapshot: snapshot_name,
        };
        fs::write(
            dir.join("checkpoints")
                .join(format!("task_{}.json", boundary.task)),
            serde_json::to_string(&checkpoint)?,
        )?;
    }
    let row = summary_row(cfg, job, run_id, output);
    fs::write(dir.join("summary_row.json"), serde_json::to_string_pretty(&row)?)?;
    Ok(())
}

/// Run a batch of cell jobs, optionally across a worker pool, writing a
/// failure record for any job that dies. Rows come back sorted.
fn execute_jobs(jobs: &[CellJob], out_root: &Path, worker_count: Option<usize>) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out_root)?;
    let run_one = |job: &CellJob| -> Result<SummaryRow> {
        execute_cell(job, out_root).map_err(|e| {
            let dir = cell_dir(out_root, &job.cell, job.seed);
            let record = FailureRecord {
                cell: job.cell.clone(),
                seed: job.seed,
                error: e.to_string(),
            };
            if fs::create_dir_all(&dir).is_ok() {
                let _ = serde_json::to_string_pretty(&record)
                    .map(|text| fs::write(dir.join("failure.json"), text));
            }
            e
        })
    };
    let results: Vec<Result<SummaryRow>> = match worker_count {
        Some(n) if n > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            pool.install(|| jobs.par_iter().map(run_one).collect())
        }
        _ => jobs.iter().map(run_one).collect(),
    };
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    rows.sort_by(|a, b| a.cell.cmp(&b.cell).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

fn write_summaries(out_root: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_summary_csv(rows, &mut buf)?;
    fs::write(out_root.join("summary.csv"), buf)?;
    let mut buf = Vec::new();
    write_aggregate_csv(&aggregate(rows), &mut buf)?;
    fs::write(out_root.join("summary_agg.csv"), buf)?;
    Ok(())
}

fn resolve_out(cfg: &ExperimentConfig, options: &RunOptions) -> PathBuf {
    options
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn resolve_seeds(cfg: &ExperimentConfig, options: &RunOptions) -> Vec<u64> {
    match options.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

/// Execute the configured experiment for every seed.
pub fn run_command(cfg: &ExperimentConfig, options: &RunOptions) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let out_root = resolve_out(cfg, options);
    let cell = cfg.algorithm()?.label();
    let jobs: Vec<CellJob> = resolve_seeds(cfg, options)
        .into_iter()
        .map(|seed| CellJob {
            cfg: cfg.clone(),
            cell: cell.clone(),
            param: None,
            seed,
        })
        .collect();
    let rows = execute_jobs(&jobs, &out_root, options.jobs)?;
    write_summaries(&out_root, &rows)?;
    Ok(rows)
}

/// Run the cross product of parameter values and seeds.
pub fn sweep_command(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[String],
    options: &RunOptions,
) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let out_root = resolve_out(cfg, options);
    let seeds = resolve_seeds(cfg, options);
    let mut jobs = Vec::new();
    for value in values {
        let mut cell_cfg = cfg.clone();
        apply_param(&mut cell_cfg, param, value)?;
        let cell = format!("{param}_{value}");
        for &seed in &seeds {
            jobs.push(CellJob {
                cfg: cell_cfg.clone(),
                cell: cell.clone(),
                param: Some((param.to_string(), value.clone())),
                seed,
            });
        }
    }
    let rows = execute_jobs(&jobs, &out_root, options.jobs)?;
    write_summaries(&out_root, &rows)?;
    Ok(rows)
}

/// Run the seven component configurations over every seed.
pub fn ablate_command(cfg: &ExperimentConfig, options: &RunOptions) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let out_root = resolve_out(cfg, options);
    let seeds = resolve_seeds(cfg, options);
    let mut jobs = Vec::new();
    for algo in Algorithm::ablation_cells() {
        let mut cell_cfg = cfg.clone();
        cell_cfg.federation.algorithm = algo.label();
        for &seed in &seeds {
            jobs.push(CellJob {
                cfg: cell_cfg.clone(),
                cell: algo.label(),
                param: None,
                seed,
            });
        }
    }
    let rows = execute_jobs(&jobs, &out_root, options.jobs)?;
    write_summaries(&out_root, &rows)?;
    Ok(rows)
}

/// Re-summarize an existing output tree from its `summary_row.json` files.
pub fn report_command(out_root: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    if !out_root.is_dir() {
        return Err(Error::Config(format!(
            "{} is not a directory",
            out_root.display()
        )));
    }
    for cell_entry in fs::read_dir(out_root)? {
        let cell_path = cell_entry?.path();
        if !cell_path.is_dir() {
            continue;
        }
        for seed_entry in fs::read_dir(&cell_path)? {
            let seed_path = seed_entry?.path();
            let row_path = seed_path.join("summary_row.json");
            if row_path.is_file() {
                let text = fs::read_to_string(&row_path)?;
                rows.push(serde_json::from_str(&text)?);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!(
            "no summary_row.json files under {}",
            out_root.display()
        )));
    }
    rows.sort_by(|a, b| a.cell.cmp(&b.cell).then(a.seed.cmp(&b.seed)));
    write_summaries(out_root, &rows)?;
    Ok(rows)
}

/// Human-oriented one-line rendering of a summary row.
pub fn format_row(row: &SummaryRow) -> String {
    let af = row
        .averaged_forgetting_pct
        .map(|v| format!("{v:.2}"))
        .unwrap_or_else(|| "-".into());
    format!(
        "{:<16} seed {:<3} acc {:>6.2}%  af {:>6}%  run {}",
        row.cell, row.seed, row.final_mean_accuracy_pct, af, row.run_id
    )
}
