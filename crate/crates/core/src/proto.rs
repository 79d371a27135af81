//! Network-free prototype maintenance, prototypical coreset selection,
//! MixStyle blending, the episodic prototype loss, and the bounded replay
//! memory they feed.
//!
//! A class prototype is a running mean of embeddings anchored by the stored
//! coreset: the coreset's mean embedding stands in for all past data of the
//! class, so no generative or prototype network has to be kept around.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::tensor::{encoder_forward, ModelShape, ParamVector};

/// Per-class embedding mean with the number of samples it summarizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub mean_embedding: Vec<f64>,
    pub seen_count: u64,
}

impl Prototype {
    pub fn new(class_id: usize, embedding_dim: usize) -> Self {
        Prototype {
            class_id,
            mean_embedding: vec![0.0; embedding_dim],
            seen_count: 0,
        }
    }
}

/// Running-mean prototype update: the coreset mean carries the weight of all
/// previously seen samples, the new embeddings extend the mean.
pub fn update_prototype(
    proto: &Prototype,
    coreset_embeddings: &Matrix,
    new_embeddings: &Matrix,
) -> Result<Prototype> {
    let dim = proto.mean_embedding.len();
    if coreset_embeddings.rows() > 0 && coreset_embeddings.cols() != dim {
        return Err(Error::Shape(format!(
            "coreset embedding width {} vs prototype dim {}",
            coreset_embeddings.cols(),
            dim
        )));
    }
    if new_embeddings.rows() > 0 && new_embeddings.cols() != dim {
        return Err(Error::Shape(format!(
            "new embedding width {} vs prototype dim {}",
            new_embeddings.cols(),
            dim
        )));
    }
    if !coreset_embeddings.is_finite() || !new_embeddings.is_finite() {
        return Err(Error::Numeric("non-finite embeddings in prototype update".into()));
    }
    let n_new = new_embeddings.rows();
    if n_new == 0 {
        return Ok(proto.clone());
    }
    let old = proto.seen_count as f64;
    let coreset_mean = coreset_embeddings.mean_row();
    let mut mean = vec![0.0; dim];
    for (j, m) in mean.iter_mut().enumerate() {
        let mut acc = coreset_mean[j] * old;
        for r in 0..n_new {
            acc += new_embeddings.row(r)[j];
        }
        *m = acc / (old + n_new as f64);
    }
    Ok(Prototype {
        class_id: proto.class_id,
        mean_embedding: mean,
        seen_count: proto.seen_count + n_new as u64,
    })
}

/// Solver settings for the coreset least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoresetSolverConfig {
    /// Use normal equations up to this many candidates, gradient descent above.
    pub direct_limit: usize,
    /// Iteration cap for the gradient-descent path.
    pub max_iters: usize,
    /// Gradient-norm tolerance for the gradient-descent path.
    pub tol: f64,
    /// Tikhonov ridge keeping the normal equations positive definite.
    pub ridge: f64,
}

impl Default for CoresetSolverConfig {
    fn default() -> Self {
        CoresetSolverConfig {
            direct_limit: 256,
            max_iters: 500,
            tol: 1e-6,
            ridge: 1e-10,
        }
    }
}

/// Outcome of a coreset selection.
#[derive(Debug, Clone)]
pub struct CoresetSolution {
    /// Per-candidate coefficients; zero outside the selected support.
    pub coefficients: Vec<f64>,
    /// Selected candidate indices, ascending, at most K.
    pub selected_indices: Vec<usize>,
    /// Value of the reconstruction objective at the returned coefficients.
    pub residual: f64,
    /// Set when fewer than K candidates were available.
    pub truncated: bool,
}

/// Squared distance between two equal-length slices.
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy support selection: grow the subset one candidate at a time,
/// each step minimizing the distance between the subset's mean embedding
/// and the target. Ties break toward the lowest index.
fn greedy_support(candidates: &Matrix, target: &[f64], k: usize) -> Vec<usize> {
    let n = candidates.rows();
    let dim = candidates.cols();
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut sum = vec![0.0; dim];
    for step in 0..k.min(n) {
        let count = (step + 1) as f64;
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let row = candidates.row(i);
            let mut d = 0.0;
            for j in 0..dim {
                let m = (sum[j] + row[j]) / count;
                let diff = m - target[j];
                d += diff * diff;
            }
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (_, pick) = best.expect("at least one unselected candidate");
        taken[pick] = true;
        for (s, v) in sum.iter_mut().zip(candidates.row(pick)) {
            *s += v;
        }
        selected.push(pick);
    }
    selected.sort_unstable();
    selected
}

/// Least squares on the selected support: minimize
/// `| (1/n) * sum_i a_i e_i - b |^2` (plus a tiny ridge) over the support
/// coefficients via normal equations, or gradient descent past the
/// candidate limit.
fn fit_support(
    candidates: &Matrix,
    support: &[usize],
    b: &[f64],
    inv_n: f64,
    cfg: &CoresetSolverConfig,
) -> Result<(Vec<f64>, f64)> {
    let s = support.len();
    if s == 0 {
        return Ok((Vec::new(), linalg::dot(b, b)));
    }
    // Gram of the scaled columns and their inner products with b.
    let mut gram = vec![0.0; s * s];
    let mut rhs = vec![0.0; s];
    for (i, &ci) in support.iter().enumerate() {
        let ei = candidates.row(ci);
        rhs[i] = inv_n * linalg::dot(ei, b);
        for (j, &cj) in support.iter().enumerate().skip(i) {
            let v = inv_n * inv_n * linalg::dot(ei, candidates.row(cj));
            gram[i * s + j] = v;
            gram[j * s + i] = v;
        }
    }
    let scale = {
        let tr: f64 = (0..s).map(|i| gram[i * s + i]).sum();
        (tr / s as f64).max(1.0)
    };
    let ridge = cfg.ridge * scale;
    let coeffs = if candidates.rows() <= cfg.direct_limit {
        let mut a = gram.clone();
        for i in 0..s {
            a[i * s + i] += ridge;
        }
        linalg::solve_spd(a, s, &rhs)?
    } else {
        // Gradient descent with a Lipschitz-safe step, run to gradient-norm
        // tolerance or the iteration cap.
        let trace: f64 = (0..s).map(|i| gram[i * s + i]).sum();
        let step = 1.0 / (2.0 * (trace + ridge)).max(1e-12);
        let mut a = vec![0.0; s];
        for _ in 0..cfg.max_iters {
            let mut grad = vec![0.0; s];
            let mut norm2 = 0.0;
            for i in 0..s {
                let mut g = -2.0 * rhs[i] + 2.0 * ridge * a[i];
                for j in 0..s {
                    g += 2.0 * gram[i * s + j] * a[j];
                }
                grad[i] = g;
                norm2 += g * g;
            }
            if norm2.sqrt() < cfg.tol {
                break;
            }
            for (ai, gi) in a.iter_mut().zip(&grad) {
                *ai -= step * gi;
            }
        }
        a
    };
    // Residual of the unridged objective at the returned coefficients.
    let mut fit = vec![0.0; b.len()];
    for (i, &ci) in support.iter().enumerate() {
        for (f, v) in fit.iter_mut().zip(candidates.row(ci)) {
            *f += inv_n * coeffs[i] * v;
        }
    }
    let residual = dist2(&fit, b);
    Ok((coeffs, residual))
}

/// Select up to K candidates whose mean embedding reconstructs the class
/// prototype, given the embeddings already held in memory.
pub fn select_coreset(
    memory_embeddings: &Matrix,
    candidate_embeddings: &Matrix,
    target_proto: &Prototype,
    k: usize,
    cfg: &CoresetSolverConfig,
) -> Result<CoresetSolution> {
    let n = candidate_embeddings.rows();
    if n == 0 {
        return Err(Error::Empty("coreset selection with no candidates".into()));
    }
    let dim = candidate_embeddings.cols();
    if target_proto.mean_embedding.len() != dim {
        return Err(Error::Shape(format!(
            "target prototype dim {} vs candidate width {}",
            target_proto.mean_embedding.len(),
            dim
        )));
    }
    if memory_embeddings.rows() > 0 && memory_embeddings.cols() != dim {
        return Err(Error::Shape("memory embedding width mismatch".into()));
    }
    if k == 0 {
        return Err(Error::Config("coreset capacity must be at least 1".into()));
    }
    // Memory contribution is fixed; the candidates fit what remains.
    let mem_mean = memory_embeddings.mean_row();
    let b: Vec<f64> = target_proto
        .mean_embedding
        .iter()
        .zip(&mem_mean)
        .map(|(p, m)| p - m)
        .collect();
    let truncated = k > n;
    let support = greedy_support(candidate_embeddings, &b, k);
    let inv_n = 1.0 / n as f64;
    let (support_coeffs, residual) = fit_support(candidate_embeddings, &support, &b, inv_n, cfg)?;
    let mut coefficients = vec![0.0; n];
    for (i, &ci) in support.iter().enumerate() {
        coefficients[ci] = support_coeffs[i];
    }
    // Selected indices are the K largest coefficients in magnitude; with the
    // off-support entries at zero this is the support itself unless the fit
    // zeroed some of it. Ties break toward the lower index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &bidx| {
        coefficients[bidx]
            .abs()
            .partial_cmp(&coefficients[a].abs())
            .unwrap()
            .then(a.cmp(&bidx))
    });
    let mut selected_indices: Vec<usize> = order.into_iter().take(k.min(n)).collect();
    selected_indices.sort_unstable();
    Ok(CoresetSolution {
        coefficients,
        selected_indices,
        residual,
        truncated,
    })
}

/// How the blend coefficient is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum MixStyleMode {
    Fixed,
    Beta { alpha: f64 },
}

/// Moment-blending configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixStyleConfig {
    pub lambda: f64,
    #[serde(flatten)]
    pub mode: MixStyleMode,
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        MixStyleConfig {
            lambda: 0.5,
            mode: MixStyleMode::Fixed,
        }
    }
}

impl MixStyleConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            MixStyleMode::Fixed => {
                if !(0.0..=1.0).contains(&self.lambda) {
                    return Err(Error::Config("mixstyle lambda must be in [0, 1]".into()));
                }
            }
            MixStyleMode::Beta { alpha } => {
                if alpha <= 0.0 {
                    return Err(Error::Config("mixstyle beta alpha must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample_lambda<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.mode {
            MixStyleMode::Fixed => self.lambda,
            MixStyleMode::Beta { alpha } => {
                let beta = rand_distr::Beta::new(alpha, alpha).expect("valid beta parameters");
                rng.sample(beta)
            }
        }
    }
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Re-style `sample` with moments blended between its own and those of
/// `style`: the output keeps the standardized content of `sample` and takes
/// mean `beta_mix` and std `gamma_mix`. Falls back to the identity when the
/// sample has zero spread.
pub fn mixstyle(sample: &[f64], style: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if sample.len() != style.len() {
        return Err(Error::Shape(format!(
            "mixstyle lengths {} vs {}",
            sample.len(),
            style.len()
        )));
    }
    if sample.is_empty() {
        return Err(Error::Empty("mixstyle of empty vectors".into()));
    }
    if lambda == 1.0 {
        return Ok(sample.to_vec());
    }
    let (mu_s, sd_s) = moments(sample);
    if sd_s <= 0.0 {
        return Ok(sample.to_vec());
    }
    let (mu_x, sd_x) = moments(style);
    let gamma_mix = lambda * sd_s + (1.0 - lambda) * sd_x;
    let beta_mix = lambda * mu_s + (1.0 - lambda) * mu_x;
    Ok(sample
        .iter()
        .map(|v| gamma_mix * (v - mu_s) / sd_s + beta_mix)
        .collect())
}

/// Episodic prototype loss: squared-distance pull toward the own-class
/// prototype plus a log-sum-exp push from all prototypes. Returns the mean
/// loss and dLoss/dEmbedding rows for the encoder backward pass.
pub fn proto_loss(
    embeddings: &Matrix,
    labels: &[usize],
    prototypes: &[Prototype],
) -> Result<(f64, Matrix)> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings vs {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if embeddings.rows() == 0 {
        return Err(Error::Empty("prototype loss over no samples".into()));
    }
    if prototypes.len() < 2 {
        return Err(Error::Config(
            "prototype loss needs at least two prototypes".into(),
        ));
    }
    let dim = embeddings.cols();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    for (idx, p) in prototypes.iter().enumerate() {
        if p.mean_embedding.len() != dim {
            return Err(Error::Shape("prototype dim mismatch".into()));
        }
        by_class.insert(p.class_id, idx);
    }
    for &l in labels {
        if !by_class.contains_key(&l) {
            return Err(Error::Config(format!("no prototype for label {l}")));
        }
    }
    let n = embeddings.rows();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_emb = Matrix::zeros(n, dim);
    let mut dists = vec![0.0; prototypes.len()];
    let mut weights = vec![0.0; prototypes.len()];
    for r in 0..n {
        let e = embeddings.row(r);
        for (k, p) in prototypes.iter().enumerate() {
            dists[k] = dist2(e, &p.mean_embedding);
        }
        let own = by_class[&labels[r]];
        // Stable log-sum-exp of -d.
        let max_neg = dists.iter().fold(f64::NEG_INFINITY, |m, &d| m.max(-d));
        let mut z = 0.0;
        for (w, &d) in weights.iter_mut().zip(&dists) {
            *w = (-d - max_neg).exp();
            z += *w;
        }
        total += dists[own] + max_neg + z.ln();
        for w in &mut weights {
            *w /= z;
        }
        let de = d_emb.row_mut(r);
        for (j, dv) in de.iter_mut().enumerate() {
            let mut g = 2.0 * (e[j] - prototypes[own].mean_embedding[j]);
            for (k, p) in prototypes.iter().enumerate() {
                g -= weights[k] * 2.0 * (e[j] - p.mean_embedding[j]);
            }
            *dv = g * inv_n;
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite prototype loss".into()));
    }
    Ok((loss, d_emb))
}

/// Per-class bounded store of input-space samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStore {
    pub task_id: usize,
    pub samples: Vec<Vec<f64>>,
    pub seen_count: u64,
}

/// Replay memory: per-class coreset stores with a shared capacity.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity_per_class: usize,
    classes: BTreeMap<usize, ClassStore>,
}

impl ReplayMemory {
    pub fn new(capacity_per_class: usize) -> Result<Self> {
        if capacity_per_class == 0 {
            return Err(Error::Config("replay capacity must be at least 1".into()));
        }
        Ok(ReplayMemory {
            capacity_per_class,
            classes: BTreeMap::new(),
        })
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassStore> {
        self.classes.get(&class_id)
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Classes stored for a given task, ascending by class id.
    pub fn classes_for_task(&self, task_id: usize) -> Vec<(usize, &ClassStore)> {
        self.classes
            .iter()
            .filter(|(_, s)| s.task_id == task_id)
            .map(|(&c, s)| (c, s))
            .collect()
    }

    /// Task ids with at least one stored sample, ascending.
    pub fn stored_task_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.classes.values().map(|s| s.task_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn set_class(
        &mut self,
        class_id: usize,
        task_id: usize,
        samples: Vec<Vec<f64>>,
        seen_count: u64,
    ) -> Result<()> {
        if samples.len() > self.capacity_per_class {
            return Err(Error::Config(format!(
                "class {} store of {} exceeds capacity {}",
                class_id,
                samples.len(),
                self.capacity_per_class
            )));
        }
        if samples
            .iter()
            .any(|s| s.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric("non-finite sample stored in memory".into()));
        }
        self.classes.insert(
            class_id,
            ClassStore {
                task_id,
                samples,
                seen_count,
            },
        );
        Ok(())
    }

    /// One record per stored sample for the line-delimited snapshot.
    pub fn snapshot(&self, client_id: usize) -> Vec<ReplaySnapshotRecord> {
        let mut records = Vec::new();
        for (&class_id, store) in &self.classes {
            for (slot, input) in store.samples.iter().enumerate() {
                records.push(ReplaySnapshotRecord {
                    client_id,
                    task_id: store.task_id,
                    class_id,
                    slot,
                    input: input.clone(),
                });
            }
        }
        records
    }
}

/// One stored sample in a replay-memory snapshot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySnapshotRecord {
    pub client_id: usize,
    pub task_id: usize,
    pub class_id: usize,
    pub slot: usize,
    pub input: Vec<f64>,
}

/// Write snapshot records as JSON lines.
pub fn write_snapshot<W: Write>(records: &[ReplaySnapshotRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read snapshot records back from JSON lines.
pub fn read_snapshot<R: BufRead>(input: R) -> Result<Vec<ReplaySnapshotRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Knobs for task ingestion.
#[derive(Debug, Clone)]
pub struct PcsConfig {
    pub solver: CoresetSolverConfig,
    pub mixstyle: MixStyleConfig,
}

impl Default for PcsConfig {
    fn default() -> Self {
        PcsConfig {
            solver: CoresetSolverConfig::default(),
            mixstyle: MixStyleConfig::default(),
        }
    }
}

/// What an ingestion pass did, for instrumentation.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// MixStyle blends performed (one per evicted sample).
    pub blends: usize,
    /// Classes touched by the pass.
    pub classes: Vec<usize>,
}

/// Ingest one task's per-class samples: update each class prototype, select
/// the coreset over existing memory plus the new candidates, and resolve
/// overflow by blending each evicted sample into its nearest retained
/// neighbor. Memory never exceeds its per-class capacity.
pub fn ingest_task<R: Rng>(
    memory: &mut ReplayMemory,
    prototypes: &mut BTreeMap<usize, Prototype>,
    task_id: usize,
    class_batches: &BTreeMap<usize, Matrix>,
    params: &ParamVector,
    shape: &ModelShape,
    cfg: &PcsConfig,
    rng: &mut R,
) -> Result<IngestReport> {
    cfg.mixstyle.validate()?;
    let k = memory.capacity_per_class();
    let mut report = IngestReport::default();
    for (&class_id, new_inputs) in class_batches {
        if new_inputs.rows() == 0 {
            continue;
        }
        report.classes.push(class_id);
        let old_samples: Vec<Vec<f64>> = memory
            .get(class_id)
            .map(|s| s.samples.clone())
            .unwrap_or_default();
        let mem_matrix = Matrix::from_rows(&old_samples)?;
        let mem_emb = if mem_matrix.rows() > 0 {
            encoder_forward(params, shape, &mem_matrix)?
        } else {
            Matrix::zeros(0, shape.embedding_dim())
        };
        let new_emb = encoder_forward(params, shape, new_inputs)?;
        let proto = prototypes
            .get(&class_id)
            .cloned()
            .unwrap_or_else(|| Prototype::new(class_id, shape.embedding_dim()));
        let updated = update_prototype(&proto, &mem_emb, &new_emb)?;

        // Pool the existing store with the new candidates.
        let mut pool_inputs = old_samples;
        let mut pool_emb_rows: Vec<Vec<f64>> =
            (0..mem_emb.rows()).map(|r| mem_emb.row(r).to_vec()).collect();
        for r in 0..new_inputs.rows() {
            pool_inputs.push(new_inputs.row(r).to_vec());
            pool_emb_rows.push(new_emb.row(r).to_vec());
        }
        let retained = if pool_inputs.len() <= k {
            pool_inputs
        } else {
            let pool_emb = Matrix::from_rows(&pool_emb_rows)?;
            let empty = Matrix::zeros(0, shape.embedding_dim());
            let solution = select_coreset(&empty, &pool_emb, &updated, k, &cfg.solver)?;
            let kept = &solution.selected_indices;
            let mut retained: Vec<Vec<f64>> =
                kept.iter().map(|&i| pool_inputs[i].clone()).collect();
            for (i, input) in pool_inputs.iter().enumerate() {
                if kept.binary_search(&i).is_ok() {
                    continue;
                }
                // Nearest retained neighbor in embedding space, ties to the
                // lowest index; the evicted sample contributes style only.
                let mut nearest = 0usize;
                let mut best = f64::INFINITY;
                for (slot, &ki) in kept.iter().enumerate() {
                    let d = dist2(&pool_emb_rows[i], &pool_emb_rows[ki]);
                    if d < best {
                        best = d;
                        nearest = slot;
                    }
                }
                let lambda = cfg.mixstyle.sample_lambda(rng);
                retained[nearest] = mixstyle(&retained[nearest], input, lambda)?;
                report.blends += 1;
            }
            retained
        };
        memory.set_class(class_id, task_id, retained, updated.seen_count)?;
        prototypes.insert(class_id, updated);
    }
    Ok(report)
}

/// Baseline ingestion without prototypical selection: keep a seeded uniform
/// random subset of the pooled samples, no prototypes, no blending.
pub fn ingest_task_random<R: Rng>(
    memory: &mut ReplayMemory,
    task_id: usize,
    class_batches: &BTreeMap<usize, Matrix>,
    rng: &mut R,
) -> Result<()> {
    let k = memory.capacity_per_class();
    for (&class_id, new_inputs) in class_batches {
        if new_inputs.rows() == 0 {
            continue;
        }
        let mut pool: Vec<Vec<f64>> = memory
            .get(class_id)
            .map(|s| s.samples.clone())
            .unwrap_or_default();
        let prior_seen = memory.get(class_id).map(|s| s.seen_count).unwrap_or(0);
        for r in 0..new_inputs.rows() {
            pool.push(new_inputs.row(r).to_vec());
        }
        let retained = if pool.len() <= k {
            pool
        } else {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            for i in 0..k {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            let mut kept = idx[..k].to_vec();
            kept.sort_unstable();
            kept.into_iter().map(|i| pool[i].clone()).collect()
        };
        memory.set_class(
            class_id,
            task_id,
            retained,
            prior_seen + new_inputs.rows() as u64,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::tensor::init_params;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn prototype_from_empty_history_is_batch_mean() {
        let proto = Prototype::new(0, 2);
        let new = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let updated = update_prototype(&proto, &Matrix::zeros(0, 2), &new).unwrap();
        assert_abs_diff_eq!(updated.mean_embedding[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(updated.mean_embedding[1], 1.0, epsilon = 1e-12);
        assert_eq!(updated.seen_count, 3);
    }

    #[test]
    fn prototype_unchanged_with_no_new_samples() {
        let proto = Prototype {
            class_id: 1,
            mean_embedding: vec![0.3, -0.2],
            seen_count: 10,
        };
        let coreset = Matrix::from_rows(&[vec![9.0, 9.0]]).unwrap();
        let updated = update_prototype(&proto, &coreset, &Matrix::zeros(0, 2)).unwrap();
        assert_eq!(updated, proto);
    }

    #[test]
    fn prototype_running_mean_hand_value() {
        let proto = Prototype {
            class_id: 0,
            mean_embedding: vec![1.0, 0.0],
            seen_count: 2,
        };
        let coreset = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let new = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let updated = update_prototype(&proto, &coreset, &new).unwrap();
        assert_abs_diff_eq!(updated.mean_embedding[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(updated.mean_embedding[1], 0.5, epsilon = 1e-12);
        assert_eq!(updated.seen_count, 4);
    }

    #[test]
    fn single_candidate_exact_fit() {
        let cand = Matrix::from_rows(&[vec![0.5, -1.5]]).unwrap();
        let target = Prototype {
            class_id: 0,
            mean_embedding: vec![0.5, -1.5],
            seen_count: 1,
        };
        let sol = select_coreset(
            &Matrix::zeros(0, 2),
            &cand,
            &target,
            1,
            &CoresetSolverConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(sol.coefficients[0], 1.0, epsilon = 1e-8);
        assert!(sol.residual < 1e-12);
        assert_eq!(sol.selected_indices, vec![0]);
        assert!(!sol.truncated);
    }

    #[test]
    fn mean_matching_candidates_reach_zero_residual() {
        let cand = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let target = Prototype {
            class_id: 0,
            mean_embedding: cand.mean_row(),
            seen_count: 4,
        };
        let sol = select_coreset(
            &Matrix::zeros(0, 2),
            &cand,
            &target,
            4,
            &CoresetSolverConfig::default(),
        )
        .unwrap();
        assert!(sol.residual < 1e-12, "residual {}", sol.residual);
    }

    /// Independent least-squares oracle: the optimal residual is the squared
    /// distance from b to the span of the scaled candidate columns, computed
    /// by Gram-Schmidt.
    fn span_residual_oracle(candidates: &Matrix, b: &[f64]) -> f64 {
        let n = candidates.rows() as f64;
        let dim = candidates.cols();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for i in 0..candidates.rows() {
            let mut v: Vec<f64> = candidates.row(i).iter().map(|x| x / n).collect();
            for q in &basis {
                let c = linalg::dot(&v, q);
                for (vv, qv) in v.iter_mut().zip(q) {
                    *vv -= c * qv;
                }
            }
            let norm = linalg::norm(&v);
            if norm > 1e-12 {
                for vv in &mut v {
                    *vv /= norm;
                }
                basis.push(v);
            }
        }
        let mut resid: Vec<f64> = b.to_vec();
        for q in &basis {
            let c = linalg::dot(&resid, q);
            for (rv, qv) in resid.iter_mut().zip(q) {
                *rv -= c * qv;
            }
        }
        let _ = dim;
        linalg::dot(&resid, &resid)
    }

    #[test]
    fn residual_matches_normal_equation_oracle() {
        let mut rng = seeds::rng(31, &[5]);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let cand = Matrix::from_rows(&rows).unwrap();
        let target = Prototype {
            class_id: 0,
            mean_embedding: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            seen_count: 5,
        };
        let sol = select_coreset(
            &Matrix::zeros(0, 2),
            &cand,
            &target,
            5,
            &CoresetSolverConfig::default(),
        )
        .unwrap();
        let oracle = span_residual_oracle(&cand, &target.mean_embedding);
        assert!(
            (sol.residual - oracle).abs() < 1e-6,
            "residual {} vs oracle {}",
            sol.residual,
            oracle
        );
    }

    #[test]
    fn gradient_descent_path_agrees_with_direct_path() {
        let mut rng = seeds::rng(77, &[6]);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let cand = Matrix::from_rows(&rows).unwrap();
        let target = Prototype {
            class_id: 0,
            mean_embedding: vec![0.2, -0.4, 0.1],
            seen_count: 8,
        };
        let direct = select_coreset(
            &Matrix::zeros(0, 3),
            &cand,
            &target,
            4,
            &CoresetSolverConfig::default(),
        )
        .unwrap();
        let gd_cfg = CoresetSolverConfig {
            direct_limit: 0,
            max_iters: 20_000,
            tol: 1e-10,
            ..CoresetSolverConfig::default()
        };
        let gd = select_coreset(&Matrix::zeros(0, 3), &cand, &target, 4, &gd_cfg).unwrap();
        assert_eq!(direct.selected_indices, gd.selected_indices);
        assert!((direct.residual - gd.residual).abs() < 1e-6);
    }

    #[test]
    fn oversized_capacity_flags_truncation() {
        let cand = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let target = Prototype {
            class_id: 0,
            mean_embedding: vec![0.5, 0.5],
            seen_count: 2,
        };
        let sol = select_coreset(
            &Matrix::zeros(0, 2),
            &cand,
            &target,
            5,
            &CoresetSolverConfig::default(),
        )
        .unwrap();
        assert!(sol.truncated);
        assert_eq!(sol.selected_indices, vec![0, 1]);
    }

    #[test]
    fn empty_candidates_error() {
        let target = Prototype::new(0, 2);
        assert!(matches!(
            select_coreset(
                &Matrix::zeros(0, 2),
                &Matrix::zeros(0, 2),
                &target,
                3,
                &CoresetSolverConfig::default()
            ),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn mixstyle_identity_at_lambda_one() {
        let sample = vec![0.3, 1.7, -2.0];
        let style = vec![5.0, 5.0, 6.0];
        let out = mixstyle(&sample, &style, 1.0).unwrap();
        assert_eq!(out, sample);
    }

    #[test]
    fn mixstyle_full_transfer_at_lambda_zero() {
        let sample = vec![0.1, 0.9, -0.5, 0.3];
        let style = vec![2.0, 4.0, 6.0, 8.0];
        let out = mixstyle(&sample, &style, 0.0).unwrap();
        let (mu_x, sd_x) = moments(&style);
        let (mu_o, sd_o) = moments(&out);
        assert_abs_diff_eq!(mu_o, mu_x, epsilon = 1e-9);
        assert_abs_diff_eq!(sd_o, sd_x, epsilon = 1e-9);
    }

    #[test]
    fn mixstyle_halfway_moments_hand_value() {
        // sample with (mean, std) = (0, 1); style with (2, 3).
        let sample = vec![1.0, -1.0, 1.0, -1.0];
        let style = vec![5.0, -1.0, 5.0, -1.0];
        let (mu_s, sd_s) = moments(&sample);
        let (mu_x, sd_x) = moments(&style);
        assert_abs_diff_eq!(mu_s, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sd_s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mu_x, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sd_x, 3.0, epsilon = 1e-12);
        let out = mixstyle(&sample, &style, 0.5).unwrap();
        let (mu_o, sd_o) = moments(&out);
        assert_abs_diff_eq!(mu_o, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sd_o, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn mixstyle_zero_spread_falls_back_to_identity() {
        let sample = vec![2.0, 2.0, 2.0];
        let style = vec![1.0, 2.0, 3.0];
        assert_eq!(mixstyle(&sample, &style, 0.3).unwrap(), sample);
    }

    #[test]
    fn proto_loss_equidistant_pair_is_ln_two() {
        let protos = vec![
            Prototype {
                class_id: 0,
                mean_embedding: vec![1.0, 0.0],
                seen_count: 1,
            },
            Prototype {
                class_id: 1,
                mean_embedding: vec![-1.0, 0.0],
                seen_count: 1,
            },
        ];
        let emb = Matrix::from_rows(&[vec![0.0, 0.7]]).unwrap();
        let (loss0, _) = proto_loss(&emb, &[0], &protos).unwrap();
        let (loss1, _) = proto_loss(&emb, &[1], &protos).unwrap();
        // d + log(2 exp(-d)) = ln 2 for either label.
        assert_abs_diff_eq!(loss0, (2.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss1, (2.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn proto_loss_vanishes_at_own_prototype_far_from_others() {
        let protos = vec![
            Prototype {
                class_id: 0,
                mean_embedding: vec![0.0, 0.0],
                seen_count: 1,
            },
            Prototype {
                class_id: 1,
                mean_embedding: vec![30.0, 0.0],
                seen_count: 1,
            },
        ];
        let emb = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (loss, _) = proto_loss(&emb, &[0], &protos).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    /// Straight-line re-evaluation of the loss for a fixed instance.
    fn oracle_proto_loss(emb: &Matrix, labels: &[usize], protos: &[Prototype]) -> f64 {
        let mut total = 0.0;
        for r in 0..emb.rows() {
            let e = emb.row(r);
            let own = protos
                .iter()
                .position(|p| p.class_id == labels[r])
                .unwrap();
            let d_own: f64 = e
                .iter()
                .zip(&protos[own].mean_embedding)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let mut z = 0.0;
            for p in protos {
                let d: f64 = e
                    .iter()
                    .zip(&p.mean_embedding)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                z += (-d).exp();
            }
            total += d_own + z.ln();
        }
        total / emb.rows() as f64
    }

    #[test]
    fn proto_loss_matches_straight_line_oracle() {
        let protos = vec![
            Prototype {
                class_id: 3,
                mean_embedding: vec![0.2, -0.1],
                seen_count: 4,
            },
            Prototype {
                class_id: 7,
                mean_embedding: vec![-0.5, 0.8],
                seen_count: 2,
            },
        ];
        let emb = Matrix::from_rows(&[
            vec![0.1, 0.0],
            vec![-0.3, 0.5],
            vec![0.4, -0.4],
            vec![0.0, 0.9],
        ])
        .unwrap();
        let labels = [3, 7, 3, 7];
        let (loss, _) = proto_loss(&emb, &labels, &protos).unwrap();
        assert_abs_diff_eq!(loss, oracle_proto_loss(&emb, &labels, &protos), epsilon = 1e-9);
    }

    #[test]
    fn proto_loss_missing_prototype_is_config_error() {
        let protos = vec![Prototype::new(0, 2), Prototype::new(1, 2)];
        let emb = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            proto_loss(&emb, &[5], &protos),
            Err(Error::Config(_))
        ));
    }

    fn tiny_model() -> (ModelShape, ParamVector) {
        let shape = ModelShape::new(3, vec![2], 4).unwrap();
        let params = init_params(&shape, 5);
        (shape, params)
    }

    fn class_batch(rows: &[Vec<f64>]) -> BTreeMap<usize, Matrix> {
        let mut m = BTreeMap::new();
        m.insert(0usize, Matrix::from_rows(rows).unwrap());
        m
    }

    #[test]
    fn ingest_without_overflow_stores_verbatim() {
        let (shape, params) = tiny_model();
        let mut memory = ReplayMemory::new(10).unwrap();
        let mut protos = BTreeMap::new();
        let rows = vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]];
        let mut rng = seeds::rng(1, &[seeds::purpose::MIXSTYLE]);
        let report = ingest_task(
            &mut memory,
            &mut protos,
            0,
            &class_batch(&rows),
            &params,
            &shape,
            &PcsConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.blends, 0);
        assert_eq!(memory.get(0).unwrap().samples, rows);
    }

    #[test]
    fn repeated_ingest_of_identical_data_keeps_prototype() {
        let (shape, params) = tiny_model();
        let mut memory = ReplayMemory::new(10).unwrap();
        let mut protos = BTreeMap::new();
        let rows = vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]];
        let mut rng = seeds::rng(2, &[seeds::purpose::MIXSTYLE]);
        for _ in 0..2 {
            ingest_task(
                &mut memory,
                &mut protos,
                0,
                &class_batch(&rows),
                &params,
                &shape,
                &PcsConfig::default(),
                &mut rng,
            )
            .unwrap();
        }
        let emb = encoder_forward(&params, &shape, &Matrix::from_rows(&rows).unwrap()).unwrap();
        let expected = emb.mean_row();
        let proto = &protos[&0];
        assert_eq!(proto.seen_count, 4);
        for (a, b) in proto.mean_embedding.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn overflow_by_one_blends_exactly_once() {
        let (shape, params) = tiny_model();
        let mut memory = ReplayMemory::new(3).unwrap();
        let mut protos = BTreeMap::new();
        let mut rng = seeds::rng(3, &[seeds::purpose::MIXSTYLE]);
        let first = vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6], vec![0.7, 0.8, 0.9]];
        ingest_task(
            &mut memory,
            &mut protos,
            0,
            &class_batch(&first),
            &params,
            &shape,
            &PcsConfig::default(),
            &mut rng,
        )
        .unwrap();
        let report = ingest_task(
            &mut memory,
            &mut protos,
            1,
            &class_batch(&[vec![0.2, 0.1, 0.0]]),
            &params,
            &shape,
            &PcsConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.blends, 1);
        assert_eq!(memory.get(0).unwrap().samples.len(), 3);
    }

    #[test]
    fn capacity_holds_under_random_fill() {
        let mut memory = ReplayMemory::new(4).unwrap();
        let mut rng = seeds::rng(9, &[seeds::purpose::MEMORY_FILL]);
        for task in 0..3 {
            let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, task as f64]).collect();
            let mut batches = BTreeMap::new();
            batches.insert(task, Matrix::from_rows(&rows).unwrap());
            ingest_task_random(&mut memory, task, &batches, &mut rng).unwrap();
            for (_, store) in memory.classes_for_task(task) {
                assert!(store.samples.len() <= 4);
            }
        }
    }

    #[test]
    fn snapshot_round_trips_through_jsonl() {
        let mut memory = ReplayMemory::new(2).unwrap();
        memory
            .set_class(3, 1, vec![vec![0.5, 0.25], vec![1.0, -1.0]], 17)
            .unwrap();
        let records = memory.snapshot(4);
        let mut buf = Vec::new();
        write_snapshot(&records, &mut buf).unwrap();
        let back = read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(records, back);
        assert_eq!(back[0].client_id, 4);
        assert_eq!(back[0].task_id, 1);
    }
}
