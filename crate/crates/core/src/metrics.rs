//! Accuracy matrix, averaged forgetting, gradient-angle statistics, the
//! local-global generalization gap, and the tabular metrics log.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamVector;

/// Lower-triangular accuracy matrix: entry `(t, i)` is the accuracy on task
/// `i`'s test set after finishing task `t`, defined for `i <= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    entries: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            num_tasks,
            entries: vec![None; num_tasks * num_tasks],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn set(&mut self, after_task: usize, on_task: usize, accuracy: f64) -> Result<()> {
        if after_task >= self.num_tasks || on_task >= self.num_tasks {
            return Err(Error::Shape(format!(
                "matrix index ({after_task}, {on_task}) out of {} tasks",
                self.num_tasks
            )));
        }
        if on_task > after_task {
            return Err(Error::Shape(
                "upper triangle of the accuracy matrix is unset by definition".into(),
            ));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Numeric(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.entries[after_task * self.num_tasks + on_task] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, after_task: usize, on_task: usize) -> Option<f64> {
        self.entries
            .get(after_task * self.num_tasks + on_task)
            .copied()
            .flatten()
    }

    /// Mean accuracy over all tasks after the final task.
    pub fn final_mean_accuracy(&self) -> Result<f64> {
        let last = self.num_tasks - 1;
        let mut sum = 0.0;
        for i in 0..self.num_tasks {
            sum += self.get(last, i).ok_or_else(|| {
                Error::Config(format!("final-row entry for task {i} unset"))
            })?;
        }
        Ok(sum / self.num_tasks as f64)
    }
}

/// Averaged forgetting: mean over non-final tasks of the drop from the
/// task's best recorded accuracy to its final accuracy. The maximum ranges
/// over every round where the entry is defined, so a task whose accuracy
/// only ever improves contributes zero.
pub fn averaged_forgetting(matrix: &AccuracyMatrix) -> Result<f64> {
    let t_total = matrix.num_tasks();
    if t_total < 2 {
        return Err(Error::Config(
            "averaged forgetting is undefined for fewer than 2 tasks".into(),
        ));
    }
    let last = t_total - 1;
    let mut sum = 0.0;
    for i in 0..last {
        let final_acc = matrix
            .get(last, i)
            .ok_or_else(|| Error::Config(format!("final accuracy for task {i} unset")))?;
        let mut best = f64::NEG_INFINITY;
        for t in i..t_total {
            if let Some(a) = matrix.get(t, i) {
                best = best.max(a);
            }
        }
        if !best.is_finite() {
            return Err(Error::Config(format!("no recorded accuracy for task {i}")));
        }
        sum += best - final_acc;
    }
    Ok(sum / last as f64)
}

/// Cosine similarity plus a flag for degenerate (zero-norm) operands, in
/// which case the value is defined as 0.
pub fn cosine(a: &ParamVector, b: &ParamVector) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok((0.0, true));
    }
    let c = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Ok((c, false))
}

/// Mean local accuracy minus global accuracy.
pub fn generalization_gap(local_accuracies: &[f64], global_accuracy: f64) -> Result<f64> {
    if local_accuracies.is_empty() {
        return Err(Error::Empty("generalization gap with no client accuracies".into()));
    }
    let mean = local_accuracies.iter().sum::<f64>() / local_accuracies.len() as f64;
    Ok(mean - global_accuracy)
}

/// Scope of a logged gradient angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CosineScope {
    /// Between a client's applied update and a stored previous-task gradient.
    Temporal,
    /// Between client pseudo-gradients within a round.
    Spatial,
}

/// One gradient-angle observation.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineRecord {
    pub round: usize,
    pub task: usize,
    pub scope: CosineScope,
    pub pair: String,
    pub value: f64,
}

/// One row of the tabular metrics log. `client` of `None` denotes the
/// global model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub algorithm: String,
    pub seed: u64,
    pub task: usize,
    pub round: usize,
    pub client: Option<usize>,
    pub metric: String,
    pub value: f64,
}

/// Append-only metrics log for one run.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog::default()
    }

    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean of a metric's values across the log, if any were recorded.
    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// Write the log as CSV with a fixed column order:
    /// `run_id,algorithm,seed,task,round,client,metric,value`.
    /// Floats use shortest round-trip formatting, so identical logs produce
    /// byte-identical files.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "run_id,algorithm,seed,task,round,client,metric,value")?;
        for r in &self.records {
            let client = match r.client {
                Some(c) => c.to_string(),
                None => "global".to_string(),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.run_id, r.algorithm, r.seed, r.task, r.round, client, r.metric, r.value
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            for (i, &a) in row.iter().enumerate() {
                m.set(t, i, a).unwrap();
            }
        }
        m
    }

    #[test]
    fn constant_accuracy_has_zero_forgetting() {
        let m = matrix(&[&[0.7], &[0.7, 0.7], &[0.7, 0.7, 0.7]]);
        assert_abs_diff_eq!(averaged_forgetting(&m).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn golden_three_task_forgetting() {
        // Task 1 accuracies over time: 0.80, 0.70, 0.60; task 2: 0.90, 0.85.
        let m = matrix(&[&[0.80], &[0.70, 0.90], &[0.60, 0.85, 0.95]]);
        assert_abs_diff_eq!(averaged_forgetting(&m).unwrap(), 0.125, epsilon = 1e-12);
    }

    #[test]
    fn improving_accuracy_has_zero_forgetting() {
        let m = matrix(&[&[0.3], &[0.4, 0.5], &[0.6, 0.7, 0.8]]);
        assert_abs_diff_eq!(averaged_forgetting(&m).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn forgetting_requires_two_tasks() {
        let m = matrix(&[&[0.5]]);
        assert!(averaged_forgetting(&m).is_err());
    }

    #[test]
    fn column_shift_leaves_forgetting_unchanged() {
        let base = matrix(&[&[0.80], &[0.70, 0.90], &[0.60, 0.85, 0.95]]);
        // Shift task-1's whole history (and final value) by +0.05.
        let shifted = matrix(&[&[0.85], &[0.75, 0.90], &[0.65, 0.85, 0.95]]);
        assert_abs_diff_eq!(
            averaged_forgetting(&base).unwrap(),
            averaged_forgetting(&shifted).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn upper_triangle_is_rejected() {
        let mut m = AccuracyMatrix::new(3);
        assert!(m.set(0, 1, 0.5).is_err());
    }

    #[test]
    fn cosine_of_identical_vectors() {
        let g = ParamVector::from_vec(vec![0.5, -1.0, 2.0]);
        let (c, degenerate) = cosine(&g, &g).unwrap();
        assert_abs_diff_eq!(c, 1.0, epsilon = 1e-12);
        assert!(!degenerate);
    }

    #[test]
    fn cosine_of_opposite_vectors() {
        let g = ParamVector::from_vec(vec![0.5, -1.0, 2.0]);
        let (c, _) = cosine(&g, &g.scaled(-1.0)).unwrap();
        assert_abs_diff_eq!(c, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_hand_value() {
        let a = ParamVector::from_vec(vec![1.0, 0.0]);
        let b = ParamVector::from_vec(vec![1.0, 1.0]);
        let (c, _) = cosine(&a, &b).unwrap();
        assert_abs_diff_eq!(c, 0.7071, epsilon = 1e-4);
    }

    #[test]
    fn cosine_zero_vector_is_degenerate() {
        let a = ParamVector::zeros(3);
        let b = ParamVector::from_vec(vec![1.0, 0.0, 0.0]);
        let (c, degenerate) = cosine(&a, &b).unwrap();
        assert_eq!(c, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn gap_zero_when_local_equals_global() {
        assert_abs_diff_eq!(
            generalization_gap(&[0.6, 0.6], 0.6).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gap_hand_value() {
        assert_abs_diff_eq!(
            generalization_gap(&[0.8, 0.6], 0.6).unwrap(),
            0.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn csv_layout_is_stable() {
        let mut log = MetricsLog::new();
        log.push(MetricRecord {
            run_id: "abc".into(),
            algorithm: "fedavg".into(),
            seed: 1,
            task: 0,
            round: 2,
            client: None,
            metric: "global_accuracy_pct".into(),
            value: 51.25,
        });
        log.push(MetricRecord {
            run_id: "abc".into(),
            algorithm: "fedavg".into(),
            seed: 1,
            task: 0,
            round: 2,
            client: Some(3),
            metric: "local_accuracy_pct".into(),
            value: 50.0,
        });
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "run_id,algorithm,seed,task,round,client,metric,value\n\
             abc,fedavg,1,0,2,global,global_accuracy_pct,51.25\n\
             abc,fedavg,1,0,2,3,local_accuracy_pct,50\n"
        );
    }
}
