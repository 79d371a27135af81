//! Task stream construction from a large class pool, synthetic dataset
//! generation, and non-IID Dirichlet partitioning.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeds;

/// One task in a client's stream: a fixed group of classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub client_id: usize,
    pub class_ids: Vec<usize>,
}

/// Build per-client task streams: each client draws a seeded permutation of
/// the class pool and chunks it into `num_tasks` groups of
/// `classes_per_task`. With `disjoint_across_clients` no class appears in
/// two clients' streams.
pub fn build_task_streams(
    num_classes: usize,
    classes_per_task: usize,
    num_clients: usize,
    num_tasks: usize,
    seed: u64,
    disjoint_across_clients: bool,
) -> Result<Vec<Vec<TaskSpec>>> {
    if classes_per_task == 0 || num_tasks == 0 || num_clients == 0 {
        return Err(Error::Config("task stream dims must be nonzero".into()));
    }
    let per_client = classes_per_task * num_tasks;
    if per_client > num_classes {
        return Err(Error::Config(format!(
            "classes_per_task * num_tasks = {} exceeds the class pool of {}",
            per_client, num_classes
        )));
    }
    if disjoint_across_clients && per_client * num_clients > num_classes {
        return Err(Error::Config(format!(
            "disjoint streams need classes_per_task * num_tasks * num_clients = {} classes \
             but the pool has {}",
            per_client * num_clients,
            num_classes
        )));
    }
    let mut streams = Vec::with_capacity(num_clients);
    if disjoint_across_clients {
        let mut rng = seeds::rng(seed, &[seeds::purpose::TASK_STREAMS]);
        let mut pool: Vec<usize> = (0..num_classes).collect();
        pool.shuffle(&mut rng);
        for client_id in 0..num_clients {
            let slice = &pool[client_id * per_client..(client_id + 1) * per_client];
            streams.push(chunk_tasks(slice, client_id, classes_per_task));
        }
    } else {
        for client_id in 0..num_clients {
            let mut rng = seeds::rng(seed, &[seeds::purpose::TASK_STREAMS, client_id as u64]);
            let mut pool: Vec<usize> = (0..num_classes).collect();
            pool.shuffle(&mut rng);
            streams.push(chunk_tasks(&pool[..per_client], client_id, classes_per_task));
        }
    }
    Ok(streams)
}

fn chunk_tasks(classes: &[usize], client_id: usize, classes_per_task: usize) -> Vec<TaskSpec> {
    classes
        .chunks(classes_per_task)
        .enumerate()
        .map(|(task_id, chunk)| TaskSpec {
            task_id,
            client_id,
            class_ids: chunk.to_vec(),
        })
        .collect()
}

/// Parameters of the Gaussian-blob synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Scale of the isotropic class-center draw.
    pub class_center_scale: f64,
    /// Standard deviation of within-class noise.
    pub within_class_std: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        SyntheticDatasetConfig {
            num_classes: 20,
            input_dim: 32,
            samples_per_class: 200,
            class_center_scale: 1.0,
            within_class_std: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        if self.input_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("dataset dims must be nonzero".into()));
        }
        if self.within_class_std <= 0.0 {
            return Err(Error::Config("within_class_std must be positive".into()));
        }
        Ok(())
    }
}

/// Per-class train/test sample store.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    /// `train[class]` is the list of training samples of that class.
    pub train: Vec<Vec<Vec<f64>>>,
    /// `test[class]` likewise for held-out samples.
    pub test: Vec<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.train.len()
    }

    /// Stack the training samples of a class into a matrix.
    pub fn train_matrix(&self, class: usize, indices: Option<&[usize]>) -> Result<Matrix> {
        let rows = &self.train[class];
        match indices {
            Some(idx) => {
                let sel: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
                Matrix::from_rows(&sel)
            }
            None => Matrix::from_rows(rows),
        }
    }
}

/// Deterministic Gaussian-blob dataset: class centers drawn once from an
/// isotropic distribution, samples around them, stratified 80/20 split.
pub fn generate_synthetic(cfg: &SyntheticDatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seeds::rng(cfg.seed, &[]);
    let mut centers = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let c: Vec<f64> = (0..cfg.input_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * cfg.class_center_scale
            })
            .collect();
        centers.push(c);
    }
    let mut train = Vec::with_capacity(cfg.num_classes);
    let mut test = Vec::with_capacity(cfg.num_classes);
    let test_count = cfg.samples_per_class / 5;
    for center in &centers {
        let mut samples: Vec<Vec<f64>> = (0..cfg.samples_per_class)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + z * cfg.within_class_std
                    })
                    .collect()
            })
            .collect();
        // Seeded shuffle then split keeps the sets stratified per class.
        samples.shuffle(&mut rng);
        let held: Vec<Vec<f64>> = samples.split_off(cfg.samples_per_class - test_count);
        train.push(samples);
        test.push(held);
    }
    Ok(Dataset {
        input_dim: cfg.input_dim,
        train,
        test,
    })
}

/// One exported sample line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetRecord {
    class_id: usize,
    split: String,
    features: Vec<f64>,
}

/// Export the dataset as line-delimited records.
pub fn export_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for (class_id, samples) in dataset.train.iter().enumerate() {
        for s in samples {
            let rec = DatasetRecord {
                class_id,
                split: "train".into(),
                features: s.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    for (class_id, samples) in dataset.test.iter().enumerate() {
        for s in samples {
            let rec = DatasetRecord {
                class_id,
                split: "test".into(),
                features: s.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Import a dataset previously exported with [`export_dataset`], or any
/// external data of the same shape.
pub fn import_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut train: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut test: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut input_dim = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        match input_dim {
            None => input_dim = Some(rec.features.len()),
            Some(d) if d != rec.features.len() => {
                return Err(Error::Shape(format!(
                    "feature length {} differs from earlier {}",
                    rec.features.len(),
                    d
                )))
            }
            _ => {}
        }
        let store = match rec.split.as_str() {
            "train" => &mut train,
            "test" => &mut test,
            other => return Err(Error::Config(format!("unknown split `{other}`"))),
        };
        if store.len() <= rec.class_id {
            store.resize(rec.class_id + 1, Vec::new());
        }
        store[rec.class_id].push(rec.features);
    }
    let input_dim = input_dim.ok_or_else(|| Error::Empty("dataset file has no records".into()))?;
    let classes = train.len().max(test.len());
    train.resize(classes, Vec::new());
    test.resize(classes, Vec::new());
    Ok(Dataset {
        input_dim,
        train,
        test,
    })
}

/// Per-class, per-client partition of training sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPartition {
    pub alpha: f64,
    /// `assignments[class][client]` lists that client's indices into the
    /// class's training samples.
    pub assignments: Vec<Vec<Vec<usize>>>,
}

/// Split every class's training samples across clients with shares drawn
/// from a symmetric Dirichlet. Shares are re-drawn (up to 100 times) until
/// every client holds at least one sample overall.
pub fn dirichlet_split(
    dataset: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<DirichletPartition> {
    if alpha <= 0.0 {
        return Err(Error::Config("dirichlet alpha must be positive".into()));
    }
    if num_clients == 0 {
        return Err(Error::Config("dirichlet split needs at least one client".into()));
    }
    let mut rng = seeds::rng(seed, &[seeds::purpose::TASK_STREAMS, u64::MAX]);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for _attempt in 0..100 {
        let mut assignments: Vec<Vec<Vec<usize>>> = Vec::with_capacity(dataset.num_classes());
        let mut per_client_total = vec![0usize; num_clients];
        for samples in &dataset.train {
            let n = samples.len();
            // Dirichlet draw via normalized gammas.
            let mut shares: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let sum: f64 = shares.iter().sum();
            if sum <= 0.0 {
                shares = vec![1.0 / num_clients as f64; num_clients];
            } else {
                for s in &mut shares {
                    *s /= sum;
                }
            }
            // Largest-remainder apportionment of exactly n samples.
            let mut counts: Vec<usize> = shares.iter().map(|s| (s * n as f64) as usize).collect();
            let assigned: usize = counts.iter().sum();
            let mut remainders: Vec<(f64, usize)> = shares
                .iter()
                .enumerate()
                .map(|(i, s)| (s * n as f64 - counts[i] as f64, i))
                .collect();
            remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, i) in remainders.iter().take(n - assigned) {
                counts[i] += 1;
            }
            // Hand out shuffled indices in contiguous chunks.
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut class_assign: Vec<Vec<usize>> = Vec::with_capacity(num_clients);
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                let mut chunk: Vec<usize> = order[cursor..cursor + count].to_vec();
                chunk.sort_unstable();
                cursor += count;
                per_client_total[client] += count;
                class_assign.push(chunk);
            }
            assignments.push(class_assign);
        }
        if per_client_total.iter().all(|&t| t > 0) {
            return Ok(DirichletPartition {
                alpha,
                assignments,
            });
        }
    }
    Err(Error::Config(
        "dirichlet split left a client empty after 100 attempts".into(),
    ))
}

/// How training samples of a class are assigned to the clients using it.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    /// Every client holding a class sees all of its training samples.
    Shared,
    /// Each client sees only its Dirichlet share of the class.
    Dirichlet(DirichletPartition),
}

impl PartitionMode {
    /// Training-sample indices of `class` available to `client`.
    pub fn class_indices(&self, dataset: &Dataset, class: usize, client: usize) -> Vec<usize> {
        match self {
            PartitionMode::Shared => (0..dataset.train[class].len()).collect(),
            PartitionMode::Dirichlet(p) => p.assignments[class][client].clone(),
        }
    }
}

/// Gini coefficient of a share vector; used by heterogeneity diagnostics.
pub fn gini(shares: &[f64]) -> f64 {
    let n = shares.len();
    if n == 0 {
        return 0.0;
    }
    let mut sorted = shares.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut weighted = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        weighted += (2.0 * (i + 1) as f64 - n as f64 - 1.0) * s;
    }
    weighted / (n as f64 * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn four_classes_partition_into_two_pairs() {
        let streams = build_task_streams(4, 2, 1, 2, 11, false).unwrap();
        let stream = &streams[0];
        assert_eq!(stream.len(), 2);
        let all: BTreeSet<usize> = stream
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect();
        assert_eq!(all, (0..4).collect());
        assert_eq!(stream[0].class_ids.len(), 2);
        assert_eq!(stream[1].class_ids.len(), 2);
    }

    #[test]
    fn disjoint_flag_separates_clients() {
        let streams = build_task_streams(8, 2, 2, 2, 5, true).unwrap();
        let a: BTreeSet<usize> = streams[0]
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect();
        let b: BTreeSet<usize> = streams[1]
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn seeds_rarely_collide_on_permutations() {
        let mut seen = BTreeSet::new();
        for seed in 0..50 {
            let streams = build_task_streams(10, 2, 1, 5, seed, false).unwrap();
            let flat: Vec<usize> = streams[0]
                .iter()
                .flat_map(|t| t.class_ids.iter().copied())
                .collect();
            seen.insert(flat);
        }
        assert_eq!(seen.len(), 50, "permutation collision across 50 seeds");
    }

    #[test]
    fn capacity_violation_names_constraint() {
        let err = build_task_streams(4, 2, 1, 3, 0, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("classes_per_task"), "message: {msg}");
        let err = build_task_streams(8, 2, 3, 2, 0, true).unwrap_err();
        assert!(err.to_string().contains("disjoint"), "message: {err}");
    }

    #[test]
    fn within_client_classes_never_repeat() {
        let streams = build_task_streams(20, 2, 4, 5, 33, false).unwrap();
        for stream in &streams {
            let mut seen = BTreeSet::new();
            for t in stream {
                for &c in &t.class_ids {
                    assert!(seen.insert(c), "class {c} repeats in a stream");
                }
            }
        }
    }

    #[test]
    fn zero_noise_limit_collapses_to_centers() {
        let cfg = SyntheticDatasetConfig {
            num_classes: 3,
            input_dim: 4,
            samples_per_class: 10,
            class_center_scale: 2.0,
            within_class_std: 1e-12,
            seed: 3,
        };
        let data = generate_synthetic(&cfg).unwrap();
        for class in 0..3 {
            let first = &data.train[class][0];
            for s in data.train[class].iter().chain(&data.test[class]) {
                for (a, b) in s.iter().zip(first) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_dataset_exactly() {
        let cfg = SyntheticDatasetConfig::default();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sizes_are_80_20() {
        let cfg = SyntheticDatasetConfig {
            samples_per_class: 50,
            ..SyntheticDatasetConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        assert_eq!(data.train[0].len(), 40);
        assert_eq!(data.test[0].len(), 10);
    }

    #[test]
    fn export_import_round_trip() {
        let cfg = SyntheticDatasetConfig {
            num_classes: 2,
            input_dim: 3,
            samples_per_class: 5,
            ..SyntheticDatasetConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let mut buf = Vec::new();
        export_dataset(&data, &mut buf).unwrap();
        let back = import_dataset(buf.as_slice()).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn huge_alpha_gives_near_uniform_shares() {
        let cfg = SyntheticDatasetConfig {
            num_classes: 4,
            samples_per_class: 1000,
            ..SyntheticDatasetConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        for seed in 0..10 {
            let part = dirichlet_split(&data, 5, 1e6, seed).unwrap();
            for class_assign in &part.assignments {
                let total: usize = class_assign.iter().map(|c| c.len()).sum();
                for client in class_assign {
                    let share = client.len() as f64 / total as f64;
                    assert!(
                        (share - 0.2).abs() < 0.01,
                        "share {share} deviates from uniform"
                    );
                }
            }
        }
    }

    #[test]
    fn low_alpha_is_more_skewed_than_high_alpha() {
        let cfg = SyntheticDatasetConfig {
            num_classes: 3,
            samples_per_class: 500,
            ..SyntheticDatasetConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let mut wins = 0;
        for seed in 0..100 {
            let skewed = dirichlet_split(&data, 8, 0.1, seed).unwrap();
            let flat = dirichlet_split(&data, 8, 100.0, seed).unwrap();
            let g = |p: &DirichletPartition| {
                let mut acc = 0.0;
                for class_assign in &p.assignments {
                    let shares: Vec<f64> =
                        class_assign.iter().map(|c| c.len() as f64).collect();
                    acc += gini(&shares);
                }
                acc / p.assignments.len() as f64
            };
            if g(&skewed) > g(&flat) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "skew ordering held in only {wins}/100 trials");
    }

    #[test]
    fn single_client_takes_everything() {
        let cfg = SyntheticDatasetConfig {
            num_classes: 2,
            samples_per_class: 30,
            ..SyntheticDatasetConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let part = dirichlet_split(&data, 1, 0.5, 0).unwrap();
        for (class, class_assign) in part.assignments.iter().enumerate() {
            assert_eq!(class_assign[0].len(), data.train[class].len());
        }
    }

    #[test]
    fn dirichlet_partition_is_exact() {
        let cfg = SyntheticDatasetConfig {
            num_classes: 3,
            samples_per_class: 123,
            ..SyntheticDatasetConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let part = dirichlet_split(&data, 4, 0.3, 9).unwrap();
        for (class, class_assign) in part.assignments.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for client in class_assign {
                for &i in client {
                    assert!(seen.insert(i), "index {i} assigned twice");
                }
            }
            assert_eq!(seen.len(), data.train[class].len(), "indices lost");
        }
    }
}
