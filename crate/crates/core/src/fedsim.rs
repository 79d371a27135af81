//! Federated orchestration: client local training with temporal gradient
//! matching, server aggregation with spatial gradient matching, the FedAvg
//! baseline, and task-boundary replay ingestion.
//!
//! Clients within a round run on parallel workers; each owns its state
//! exclusively and the server reduces updates in ascending client order, so
//! parallelism never changes results.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gm::{self, GMConfig};
use crate::linalg::Matrix;
use crate::metrics::{
    averaged_forgetting, cosine, generalization_gap, AccuracyMatrix, CosineRecord, CosineScope,
    MetricRecord, MetricsLog,
};
use crate::proto::{
    ingest_task, ingest_task_random, PcsConfig, Prototype, ReplayMemory, ReplaySnapshotRecord,
};
use crate::seeds::{self, purpose};
use crate::taskpool::{Dataset, PartitionMode, TaskSpec};
use crate::tensor::{
    backward, encoder_backward, encoder_forward, forward, head_gradient, init_params, Batch,
    EncoderGradSignal, ModelShape, ParamVector,
};

/// Which protocol components are active. FedAvg is all components off,
/// STAMP is all components on; other combinations are the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Algorithm {
    pub sam: bool,
    pub tam: bool,
    pub pcs: bool,
}

impl Algorithm {
    pub fn fedavg() -> Self {
        Algorithm {
            sam: false,
            tam: false,
            pcs: false,
        }
    }

    pub fn stamp() -> Self {
        Algorithm {
            sam: true,
            tam: true,
            pcs: true,
        }
    }

    /// Canonical label: `fedavg`, `stamp`, or a `+`-joined component list.
    pub fn label(&self) -> String {
        match (self.sam, self.tam, self.pcs) {
            (false, false, false) => "fedavg".into(),
            (true, true, true) => "stamp".into(),
            _ => {
                let mut parts = Vec::new();
                if self.sam {
                    parts.push("sam");
                }
                if self.tam {
                    parts.push("tam");
                }
                if self.pcs {
                    parts.push("pcs");
                }
                parts.join("+")
            }
        }
    }

    /// Parse a label produced by [`Algorithm::label`].
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedavg" => return Ok(Algorithm::fedavg()),
            "stamp" => return Ok(Algorithm::stamp()),
            _ => {}
        }
        let mut algo = Algorithm::fedavg();
        for part in s.split('+') {
            match part {
                "sam" => algo.sam = true,
                "tam" => algo.tam = true,
                "pcs" => algo.pcs = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown algorithm component `{other}` (expected fedavg, stamp, or \
                         a +-joined subset of sam/tam/pcs)"
                    )))
                }
            }
        }
        Ok(algo)
    }

    /// The seven configurations reported by the component study.
    pub fn ablation_cells() -> Vec<Algorithm> {
        [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (true, true, false),
            (true, false, true),
            (false, true, true),
            (true, true, true),
        ]
        .into_iter()
        .map(|(sam, tam, pcs)| Algorithm { sam, tam, pcs })
        .collect()
    }
}

/// Federation-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_clients: usize,
    pub participation_fraction: f64,
    pub local_epochs: usize,
    pub rounds_per_task: usize,
    pub num_tasks: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub batch_size: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::Config(
                "participation_fraction must be in (0, 1]".into(),
            ));
        }
        if self.local_epochs == 0 || self.rounds_per_task == 0 || self.num_tasks == 0 {
            return Err(Error::Config(
                "local_epochs, rounds_per_task, num_tasks must be at least 1".into(),
            ));
        }
        if self.local_lr <= 0.0 || self.global_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// How previous-task gradients are reconstructed for temporal matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TamGradientMode {
    /// Cross-entropy gradient over the stored replay samples of the task.
    Coreset,
    /// Mean head gradient of each class prototype fed directly to the head.
    Prototype,
}

/// Full configuration of one experiment run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub fed: FedConfig,
    pub shape: ModelShape,
    pub tam_gm: GMConfig,
    pub sam_gm: GMConfig,
    pub pcs: PcsConfig,
    pub memory_capacity: usize,
    pub tam_mode: TamGradientMode,
    /// Recompute previous-task gradients at the current parameters every
    /// round; when false they are cached once at each task boundary.
    pub recompute_task_gradients: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        self.tam_gm.validate()?;
        self.sam_gm.validate()?;
        self.pcs.mixstyle.validate()?;
        if self.memory_capacity == 0 {
            return Err(Error::Config("memory_capacity must be at least 1".into()));
        }
        Ok(())
    }
}

/// One client's view of one task: per-class training inputs plus flattened
/// train/test batches. Either split may be empty under extreme partitions.
#[derive(Debug, Clone)]
pub struct ClientTask {
    pub spec: TaskSpec,
    pub class_inputs: BTreeMap<usize, Matrix>,
    pub train_inputs: Matrix,
    pub train_labels: Vec<usize>,
    pub test_inputs: Matrix,
    pub test_labels: Vec<usize>,
}

impl ClientTask {
    pub fn train_is_empty(&self) -> bool {
        self.train_labels.is_empty()
    }
}

/// Bind task streams to a dataset under a partition mode, producing each
/// client's per-task data views.
pub fn assemble_client_tasks(
    dataset: &Dataset,
    streams: &[Vec<TaskSpec>],
    partition: &PartitionMode,
) -> Result<Vec<Vec<ClientTask>>> {
    let mut out = Vec::with_capacity(streams.len());
    for stream in streams {
        let mut tasks = Vec::with_capacity(stream.len());
        for spec in stream {
            let mut class_inputs = BTreeMap::new();
            let mut train_rows: Vec<Vec<f64>> = Vec::new();
            let mut train_labels = Vec::new();
            let mut test_rows: Vec<Vec<f64>> = Vec::new();
            let mut test_labels = Vec::new();
            let mut sorted = spec.class_ids.clone();
            sorted.sort_unstable();
            for &class in &sorted {
                if class >= dataset.num_classes() {
                    return Err(Error::Config(format!(
                        "task references class {class} outside the dataset"
                    )));
                }
                let indices = partition.class_indices(dataset, class, spec.client_id);
                let rows: Vec<Vec<f64>> = indices
                    .iter()
                    .map(|&i| dataset.train[class][i].clone())
                    .collect();
                for r in &rows {
                    train_rows.push(r.clone());
                    train_labels.push(class);
                }
                class_inputs.insert(class, Matrix::from_rows(&rows)?);
                for r in &dataset.test[class] {
                    test_rows.push(r.clone());
                    test_labels.push(class);
                }
            }
            tasks.push(ClientTask {
                spec: spec.clone(),
                class_inputs,
                train_inputs: Matrix::from_rows(&train_rows)?,
                train_labels,
                test_inputs: Matrix::from_rows(&test_rows)?,
                test_labels,
            });
        }
        out.push(tasks);
    }
    Ok(out)
}

/// Client-side persistent state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub params: ParamVector,
    pub memory: ReplayMemory,
    pub prototypes: BTreeMap<usize, Prototype>,
    pub current_task: usize,
    pub cached_task_gradients: BTreeMap<usize, ParamVector>,
}

impl ClientState {
    pub fn new(client_id: usize, params: ParamVector, memory_capacity: usize) -> Result<Self> {
        Ok(ClientState {
            client_id,
            params,
            memory: ReplayMemory::new(memory_capacity)?,
            prototypes: BTreeMap::new(),
            current_task: 0,
            cached_task_gradients: BTreeMap::new(),
        })
    }
}

/// Server-side state.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamVector,
    pub round: usize,
    pub task: usize,
}

/// What a client produced in one round.
#[derive(Debug, Clone)]
pub struct LocalRoundOutcome {
    pub client_id: usize,
    /// `None` when the client had no data for the task and was skipped.
    pub uploaded: Option<ParamVector>,
    /// Number of task gradients that entered temporal matching (0 without TAM).
    pub gm_task_count: usize,
    /// Cosine between the applied update and each stored previous-task
    /// gradient, ascending by task.
    pub temporal_cosines: Vec<(usize, f64)>,
}

/// Shuffled mini-batch index chunks for one epoch.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn batch_from_indices(task: &ClientTask, indices: &[usize]) -> Result<Batch> {
    let rows = task.train_inputs.select_rows(indices);
    let labels = indices.iter().map(|&i| task.train_labels[i]).collect();
    Batch::new(rows, labels)
}

/// Gradient of a previous task reconstructed from the client's memory, or
/// `None` when nothing is stored for that task.
pub fn task_gradient_from_memory(
    state: &ClientState,
    params: &ParamVector,
    shape: &ModelShape,
    task_idx: usize,
    mode: TamGradientMode,
) -> Result<Option<ParamVector>> {
    let stores = state.memory.classes_for_task(task_idx);
    if stores.is_empty() {
        return Ok(None);
    }
    match mode {
        TamGradientMode::Coreset => {
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut labels = Vec::new();
            for (class, store) in stores {
                for s in &store.samples {
                    rows.push(s.clone());
                    labels.push(class);
                }
            }
            if rows.is_empty() {
                return Ok(None);
            }
            let batch = Batch::new(Matrix::from_rows(&rows)?, labels)?;
            Ok(Some(backward(params, shape, &batch)?))
        }
        TamGradientMode::Prototype => {
            let mut acc = ParamVector::zeros(params.len());
            let mut count = 0usize;
            for (class, _) in stores {
                if let Some(proto) = state.prototypes.get(&class) {
                    let g = head_gradient(params, shape, &proto.mean_embedding, class)?;
                    acc.add_scaled(&g, 1.0)?;
                    count += 1;
                }
            }
            if count == 0 {
                return Ok(None);
            }
            Ok(Some(acc.scaled(1.0 / count as f64)))
        }
    }
}

/// All reconstructable previous-task gradients, ascending by task.
fn previous_task_gradients(
    state: &ClientState,
    params: &ParamVector,
    shape: &ModelShape,
    current_task: usize,
    mode: TamGradientMode,
) -> Result<Vec<(usize, ParamVector)>> {
    let mut grads = Vec::new();
    for i in 0..current_task {
        if let Some(g) = task_gradient_from_memory(state, params, shape, i, mode)? {
            grads.push((i, g));
        }
    }
    Ok(grads)
}

/// One episodic prototype step: embed a seeded sample of the task data,
/// build fresh prototypes for the classes present (stored prototypes stand
/// in for past classes), and take an encoder step along the prototype loss.
fn proto_step(
    params: &mut ParamVector,
    shape: &ModelShape,
    state: &ClientState,
    task: &ClientTask,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let n = task.train_labels.len();
    let episode = epoch_batches(n, n.min(task.train_labels.len().min(128)), rng)
        .into_iter()
        .next()
        .unwrap_or_default();
    if episode.is_empty() {
        return Ok(());
    }
    let inputs = task.train_inputs.select_rows(&episode);
    let labels: Vec<usize> = episode.iter().map(|&i| task.train_labels[i]).collect();
    let embeddings = encoder_forward(params, shape, &inputs)?;
    // Fresh prototypes for present classes from this episode's embeddings.
    let mut present: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (r, &label) in labels.iter().enumerate() {
        let entry = present
            .entry(label)
            .or_insert_with(|| (vec![0.0; shape.embedding_dim()], 0));
        for (a, b) in entry.0.iter_mut().zip(embeddings.row(r)) {
            *a += b;
        }
        entry.1 += 1;
    }
    let mut protos: Vec<Prototype> = present
        .iter()
        .map(|(&class, (sum, count))| Prototype {
            class_id: class,
            mean_embedding: sum.iter().map(|v| v / *count as f64).collect(),
            seen_count: *count as u64,
        })
        .collect();
    for (&class, stored) in &state.prototypes {
        if !present.contains_key(&class) {
            protos.push(stored.clone());
        }
    }
    if protos.len() < 2 {
        return Ok(());
    }
    let (_, d_emb) = crate::proto::proto_loss(&embeddings, &labels, &protos)?;
    let signal = EncoderGradSignal::new(inputs, d_emb)?;
    let grad = encoder_backward(params, shape, &signal)?;
    params.add_scaled(&grad, -lr)?;
    Ok(())
}

/// One client round: E epochs of mini-batch SGD (plus prototype steps when
/// PCS is on), then, with TAM, a corrective update along the matched
/// combination of the current and stored previous-task gradients.
pub fn client_local_round(
    state: &mut ClientState,
    global: &ParamVector,
    task: &ClientTask,
    task_idx: usize,
    round_idx: usize,
    cfg: &RunConfig,
) -> Result<LocalRoundOutcome> {
    if task.train_is_empty() {
        return Ok(LocalRoundOutcome {
            client_id: state.client_id,
            uploaded: None,
            gm_task_count: 0,
            temporal_cosines: Vec::new(),
        });
    }
    let fed = &cfg.fed;
    let client = state.client_id as u64;
    // Previous-task gradients at the received parameters, used for the
    // alignment measurement regardless of algorithm.
    let measured = previous_task_gradients(state, global, &cfg.shape, task_idx, cfg.tam_mode)?;

    let mut params = global.clone();
    let n = task.train_labels.len();
    let mut epoch_means: Vec<ParamVector> = Vec::with_capacity(fed.local_epochs);
    for epoch in 0..fed.local_epochs {
        let mut rng = seeds::rng(
            fed.seed,
            &[
                purpose::BATCHING,
                task_idx as u64,
                round_idx as u64,
                client,
                epoch as u64,
            ],
        );
        let chunks = epoch_batches(n, fed.batch_size, &mut rng);
        let mut acc = ParamVector::zeros(params.len());
        let count = chunks.len();
        for chunk in chunks {
            let batch = batch_from_indices(task, &chunk)?;
            let grad = backward(&params, &cfg.shape, &batch)?;
            params.add_scaled(&grad, -fed.local_lr)?;
            acc.add_scaled(&grad, 1.0)?;
        }
        epoch_means.push(acc.scaled(1.0 / count as f64));
        if fed.algorithm.pcs {
            let mut proto_rng = seeds::rng(
                fed.seed,
                &[
                    purpose::PROTO_EPISODE,
                    task_idx as u64,
                    round_idx as u64,
                    client,
                    epoch as u64,
                ],
            );
            proto_step(
                &mut params,
                &cfg.shape,
                state,
                task,
                fed.local_lr,
                &mut proto_rng,
            )?;
        }
    }
    let current_grad = ParamVector::mean(&epoch_means)?;

    let mut gm_task_count = 0;
    if fed.algorithm.tam {
        let mut inputs: Vec<ParamVector> = if cfg.recompute_task_gradients {
            previous_task_gradients(state, &params, &cfg.shape, task_idx, cfg.tam_mode)?
                .into_iter()
                .map(|(_, g)| g)
                .collect()
        } else {
            (0..task_idx)
                .filter_map(|i| state.cached_task_gradients.get(&i).cloned())
                .collect()
        };
        inputs.push(current_grad);
        gm_task_count = inputs.len();
        let matched = gm::gradient_match(&inputs, &cfg.tam_gm)?;
        params.add_scaled(&matched, -fed.local_lr)?;
    }
    if !params.is_finite() {
        return Err(Error::Numeric(format!(
            "client {client} produced non-finite parameters in round {round_idx}"
        )));
    }

    // Alignment of the applied update with stored previous-task gradients.
    let applied = global.minus(&params)?;
    let mut temporal_cosines = Vec::with_capacity(measured.len());
    for (i, g) in &measured {
        let (c, degenerate) = cosine(&applied, g)?;
        if !degenerate {
            temporal_cosines.push((*i, c));
        }
    }

    state.params = params.clone();
    Ok(LocalRoundOutcome {
        client_id: state.client_id,
        uploaded: Some(params),
        gm_task_count,
        temporal_cosines,
    })
}

/// Aggregate uploaded client models into a new global model. Pseudo-
/// gradients are `old - new` so that, with the global learning rate at 1
/// and SAM disabled, the result is the plain average of client models.
/// Returns the per-client pseudo-gradients in ascending client order.
pub fn server_aggregate(
    server: &mut ServerState,
    updates: &[(usize, ParamVector)],
    cfg: &RunConfig,
) -> Result<Vec<ParamVector>> {
    if updates.is_empty() {
        return Err(Error::Config("server aggregation with no updates".into()));
    }
    let mut ordered: Vec<&(usize, ParamVector)> = updates.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let mut deltas = Vec::with_capacity(ordered.len());
    for (_, uploaded) in &ordered {
        deltas.push(server.params.minus(uploaded)?);
    }
    let direction = if cfg.fed.algorithm.sam {
        gm::gradient_match(&deltas, &cfg.sam_gm)?
    } else {
        ParamVector::mean(&deltas)?
    };
    server.params.add_scaled(&direction, -cfg.fed.global_lr)?;
    if !server.params.is_finite() {
        return Err(Error::Numeric("non-finite global parameters".into()));
    }
    Ok(deltas)
}

/// Sample the participating clients for one round: uniform without
/// replacement, count = round(fraction * U) clamped to [1, U], ascending.
pub fn sample_participants<R: Rng>(
    num_clients: usize,
    fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let count = ((fraction * num_clients as f64).round() as usize).clamp(1, num_clients);
    let mut idx: Vec<usize> = (0..num_clients).collect();
    for i in 0..count {
        let j = rng.gen_range(i..num_clients);
        idx.swap(i, j);
    }
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Fraction of rows whose argmax logit matches the label.
pub fn evaluate_accuracy(
    params: &ParamVector,
    shape: &ModelShape,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    let batch = Batch::new(inputs.clone(), labels.to_vec())?;
    let out = forward(params, shape, &batch)?;
    let mut correct = 0usize;
    for r in 0..out.logits.rows() {
        let row = out.logits.row(r);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == labels[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean pairwise cosine among a set of vectors (None with fewer than two).
fn mean_pairwise_cosine(vectors: &[ParamVector]) -> Result<Option<f64>> {
    if vectors.len() < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..vectors.len() {
        for j in (i + 1)..vectors.len() {
            let (c, degenerate) = cosine(&vectors[i], &vectors[j])?;
            if !degenerate {
                sum += c;
                count += 1;
            }
        }
    }
    Ok(if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    })
}

/// Scalar summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_mean_accuracy: f64,
    pub averaged_forgetting: Option<f64>,
    pub mean_temporal_cosine: Option<f64>,
    pub mean_spatial_cosine: Option<f64>,
}

/// Task-boundary artifact: the global model and every client's replay
/// snapshot at that point.
#[derive(Debug, Clone)]
pub struct BoundaryArtifact {
    pub task: usize,
    pub params: ParamVector,
    pub replay: Vec<ReplaySnapshotRecord>,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: MetricsLog,
    pub cosine_log: Vec<CosineRecord>,
    pub accuracy_matrix: AccuracyMatrix,
    pub summary: RunSummary,
    pub boundaries: Vec<BoundaryArtifact>,
    pub final_params: ParamVector,
}

/// Execute the full T-task, R-round experiment. Deterministic in
/// (configuration, seed) including under parallel client execution.
pub fn run_experiment(
    cfg: &RunConfig,
    tasks: &[Vec<ClientTask>],
    run_id: &str,
) -> Result<RunOutput> {
    cfg.validate()?;
    let fed = &cfg.fed;
    if tasks.len() != fed.num_clients {
        return Err(Error::Config(format!(
            "{} task streams for {} clients",
            tasks.len(),
            fed.num_clients
        )));
    }
    for stream in tasks {
        if stream.len() != fed.num_tasks {
            return Err(Error::Config(format!(
                "a stream has {} tasks, expected {}",
                stream.len(),
                fed.num_tasks
            )));
        }
    }
    let algorithm = fed.algorithm.label();
    let param_len = cfg.shape.param_count();
    let mut server = ServerState {
        params: init_params(&cfg.shape, fed.seed),
        round: 0,
        task: 0,
    };
    let mut clients: Vec<ClientState> = (0..fed.num_clients)
        .map(|id| ClientState::new(id, server.params.clone(), cfg.memory_capacity))
        .collect::<Result<_>>()?;

    let mut log = MetricsLog::new();
    let mut cosine_log: Vec<CosineRecord> = Vec::new();
    let mut matrix = AccuracyMatrix::new(fed.num_tasks);
    let mut boundaries = Vec::with_capacity(fed.num_tasks);
    let record = |metric: &str, task: usize, round: usize, client: Option<usize>, value: f64| {
        MetricRecord {
            run_id: run_id.to_string(),
            algorithm: algorithm.clone(),
            seed: fed.seed,
            task,
            round,
            client,
            metric: metric.to_string(),
            value,
        }
    };

    for t in 0..fed.num_tasks {
        server.task = t;
        for r in 0..fed.rounds_per_task {
            server.round = t * fed.rounds_per_task + r;
            let mut part_rng =
                seeds::rng(fed.seed, &[purpose::PARTICIPATION, t as u64, r as u64]);
            let participants =
                sample_participants(fed.num_clients, fed.participation_fraction, &mut part_rng);
            let mask: Vec<bool> = {
                let mut m = vec![false; fed.num_clients];
                for &p in &participants {
                    m[p] = true;
                }
                m
            };
            let global = server.params.clone();
            let outcomes: Vec<Result<LocalRoundOutcome>> = clients
                .par_iter_mut()
                .enumerate()
                .filter(|(i, _)| mask[*i])
                .map(|(i, state)| client_local_round(state, &global, &tasks[i][t], t, r, cfg))
                .collect();
            let mut updates: Vec<(usize, ParamVector)> = Vec::new();
            let mut round_outcomes = Vec::with_capacity(outcomes.len());
            for outcome in outcomes {
                let outcome = outcome?;
                if let Some(uploaded) = &outcome.uploaded {
                    if uploaded.len() != param_len {
                        return Err(Error::Shape("parameter length drift in upload".into()));
                    }
                    updates.push((outcome.client_id, uploaded.clone()));
                }
                round_outcomes.push(outcome);
            }
            let deltas = server_aggregate(&mut server, &updates, cfg)?;

            // Temporal alignment logging.
            for outcome in &round_outcomes {
                if outcome.temporal_cosines.is_empty() {
                    continue;
                }
                let mean: f64 = outcome
                    .temporal_cosines
                    .iter()
                    .map(|(_, c)| *c)
                    .sum::<f64>()
                    / outcome.temporal_cosines.len() as f64;
                log.push(record(
                    "temporal_cosine",
                    t,
                    r,
                    Some(outcome.client_id),
                    mean,
                ));
                for (i, c) in &outcome.temporal_cosines {
                    cosine_log.push(CosineRecord {
                        round: server.round,
                        task: t,
                        scope: CosineScope::Temporal,
                        pair: format!("client{}:task{}", outcome.client_id, i),
                        value: *c,
                    });
                }
            }
            // Spatial alignment logging.
            if let Some(mean) = mean_pairwise_cosine(&deltas)? {
                log.push(record("spatial_cosine", t, r, None, mean));
                cosine_log.push(CosineRecord {
                    round: server.round,
                    task: t,
                    scope: CosineScope::Spatial,
                    pair: "round".into(),
                    value: mean,
                });
            }
            // Per-round accuracy on the current task, local vs global.
            let mut locals = Vec::new();
            let mut globals = Vec::new();
            for outcome in &round_outcomes {
                let i = outcome.client_id;
                let task_view = &tasks[i][t];
                if task_view.test_labels.is_empty() || outcome.uploaded.is_none() {
                    continue;
                }
                let local = evaluate_accuracy(
                    &clients[i].params,
                    &cfg.shape,
                    &task_view.test_inputs,
                    &task_view.test_labels,
                )?;
                let global_acc = evaluate_accuracy(
                    &server.params,
                    &cfg.shape,
                    &task_view.test_inputs,
                    &task_view.test_labels,
                )?;
                log.push(record("local_accuracy_pct", t, r, Some(i), local * 100.0));
                locals.push(local);
                globals.push(global_acc);
            }
            if !locals.is_empty() {
                let global_mean = globals.iter().sum::<f64>() / globals.len() as f64;
                log.push(record("global_accuracy_pct", t, r, None, global_mean * 100.0));
                let gap = generalization_gap(&locals, global_mean)?;
                log.push(record("generalization_gap_pct", t, r, None, gap * 100.0));
            }
        }

        // Task boundary: replay ingestion, optional gradient caching,
        // accuracy-matrix evaluation, checkpoint artifact.
        for (i, state) in clients.iter_mut().enumerate() {
            let task_view = &tasks[i][t];
            if !task_view.class_inputs.is_empty() && !task_view.train_is_empty() {
                if fed.algorithm.pcs {
                    let mut rng = seeds::rng(
                        fed.seed,
                        &[purpose::MIXSTYLE, t as u64, i as u64],
                    );
                    ingest_task(
                        &mut state.memory,
                        &mut state.prototypes,
                        t,
                        &task_view.class_inputs,
                        &server.params,
                        &cfg.shape,
                        &cfg.pcs,
                        &mut rng,
                    )?;
                } else {
                    let mut rng = seeds::rng(
                        fed.seed,
                        &[purpose::MEMORY_FILL, t as u64, i as u64],
                    );
                    ingest_task_random(
                        &mut state.memory,
                        t,
                        &task_view.class_inputs,
                        &mut rng,
                    )?;
                }
                if !cfg.recompute_task_gradients {
                    if let Some(g) = task_gradient_from_memory(
                        state,
                        &server.params,
                        &cfg.shape,
                        t,
                        cfg.tam_mode,
                    )? {
                        state.cached_task_gradients.insert(t, g);
                    }
                }
            }
            state.current_task = t + 1;
        }
        let last_round = fed.rounds_per_task - 1;
        for i_task in 0..=t {
            let mut acc_sum = 0.0;
            let mut count = 0usize;
            for (c, stream) in tasks.iter().enumerate() {
                let view = &stream[i_task];
                if view.test_labels.is_empty() {
                    continue;
                }
                acc_sum += evaluate_accuracy(
                    &server.params,
                    &cfg.shape,
                    &view.test_inputs,
                    &view.test_labels,
                )?;
                count += 1;
                let _ = c;
            }
            if count > 0 {
                let acc = acc_sum / count as f64;
                matrix.set(t, i_task, acc)?;
                log.push(record(
                    &format!("acc_task{i_task}_pct"),
                    t,
                    last_round,
                    None,
                    acc * 100.0,
                ));
            }
        }
        let mut replay = Vec::new();
        for state in &clients {
            replay.extend(state.memory.snapshot(state.client_id));
        }
        boundaries.push(BoundaryArtifact {
            task: t,
            params: server.params.clone(),
            replay,
        });
    }

    let final_mean_accuracy = matrix.final_mean_accuracy()?;
    let averaged = if fed.num_tasks >= 2 {
        Some(averaged_forgetting(&matrix)?)
    } else {
        None
    };
    let mean_scope = |scope: CosineScope| {
        let values: Vec<f64> = cosine_log
            .iter()
            .filter(|c| c.scope == scope)
            .map(|c| c.value)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let summary = RunSummary {
        final_mean_accuracy,
        averaged_forgetting: averaged,
        mean_temporal_cosine: mean_scope(CosineScope::Temporal),
        mean_spatial_cosine: mean_scope(CosineScope::Spatial),
    };
    let last_round = fed.rounds_per_task - 1;
    let last_task = fed.num_tasks - 1;
    log.push(record(
        "final_mean_accuracy_pct",
        last_task,
        last_round,
        None,
        final_mean_accuracy * 100.0,
    ));
    if let Some(af) = averaged {
        log.push(record(
            "averaged_forgetting_pct",
            last_task,
            last_round,
            None,
            af * 100.0,
        ));
    }
    Ok(RunOutput {
        metrics: log,
        cosine_log,
        accuracy_matrix: matrix,
        summary,
        boundaries,
        final_params: server.params.clone(),
    })
}
