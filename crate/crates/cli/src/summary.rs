//! Per-run summary rows and their CSV collation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use stamp_core::Result;

/// One row of `summary.csv`: the scalar outcome of a single (cell, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub cell: String,
    pub algorithm: String,
    pub seed: u64,
    pub param: Option<String>,
    pub value: Option<f64>,
    pub final_mean_accuracy_pct: f64,
    pub averaged_forgetting_pct: Option<f64>,
    pub mean_temporal_cosine: Option<f64>,
    pub mean_spatial_cosine: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write per-seed rows, sorted by (cell, seed) for stable output.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "cell,algorithm,seed,param,value,run_id,final_mean_accuracy_pct,\
         averaged_forgetting_pct,mean_temporal_cosine,mean_spatial_cosine"
    )?;
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.cell.cmp(&b.cell).then(a.seed.cmp(&b.seed)));
    for r in sorted {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cell,
            r.algorithm,
            r.seed,
            r.param.clone().unwrap_or_default(),
            opt(r.value),
            r.run_id,
            r.final_mean_accuracy_pct,
            opt(r.averaged_forgetting_pct),
            opt(r.mean_temporal_cosine),
            opt(r.mean_spatial_cosine),
        )?;
    }
    Ok(())
}

/// Aggregate of one cell across its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAggregate {
    pub cell: String,
    pub algorithm: String,
    pub param: Option<String>,
    pub value: Option<f64>,
    pub n_seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
    pub temporal_cosine_mean: Option<f64>,
    pub spatial_cosine_mean: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn mean_of_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Group rows by cell and aggregate; cells come out in sorted order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<CellAggregate> {
    let mut cells: Vec<String> = rows.iter().map(|r| r.cell.clone()).collect();
    cells.sort();
    cells.dedup();
    cells
        .into_iter()
        .map(|cell| {
            let members: Vec<&SummaryRow> = rows.iter().filter(|r| r.cell == cell).collect();
            let accs: Vec<f64> = members.iter().map(|r| r.final_mean_accuracy_pct).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&accs);
            let afs: Vec<f64> = members
                .iter()
                .filter_map(|r| r.averaged_forgetting_pct)
                .collect();
            let (forgetting_mean, forgetting_std) = if afs.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&afs);
                (Some(m), Some(s))
            };
            CellAggregate {
                cell: cell.clone(),
                algorithm: members[0].algorithm.clone(),
                param: members[0].param.clone(),
                value: members[0].value,
                n_seeds: members.len(),
                accuracy_mean,
                accuracy_std,
                forgetting_mean,
                forgetting_std,
                temporal_cosine_mean: mean_of_present(
                    &members
                        .iter()
                        .map(|r| r.mean_temporal_cosine)
                        .collect::<Vec<_>>(),
                ),
                spatial_cosine_mean: mean_of_present(
                    &members
                        .iter()
                        .map(|r| r.mean_spatial_cosine)
                        .collect::<Vec<_>>(),
                ),
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(aggs: &[CellAggregate], mut out: W) -> Result<()> {
    writeln!(
        out,
        "cell,algorithm,param,value,n_seeds,accuracy_mean_pct,accuracy_std_pct,\
         forgetting_mean_pct,forgetting_std_pct,temporal_cosine_mean,spatial_cosine_mean"
    )?;
    for a in aggs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            a.cell,
            a.algorithm,
            a.param.clone().unwrap_or_default(),
            opt(a.value),
            a.n_seeds,
            a.accuracy_mean,
            a.accuracy_std,
            opt(a.forgetting_mean),
            opt(a.forgetting_std),
            opt(a.temporal_cosine_mean),
            opt(a.spatial_cosine_mean),
        )?;
    }
    Ok(())
}
