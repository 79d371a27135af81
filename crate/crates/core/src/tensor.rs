//! Minimal dense numerical kernel: flat parameter vectors, a two-part MLP
//! (tanh encoder plus linear classification head) with manual
//! backpropagation, cross-entropy loss, and a finite-difference gradient
//! checker.
//!
//! All arithmetic is f64. Functions here are pure and hold no state, so they
//! are safe to call from parallel workers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeds;

/// Flat vector of model parameters, or a gradient in parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        crate::linalg::dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, alpha: f64) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "add_scaled length {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| alpha * v).collect())
    }

    pub fn minus(&self, other: &ParamVector) -> Result<ParamVector> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "minus length {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Arithmetic mean of a nonempty set of equal-length vectors.
    pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Empty("mean of no vectors".into()))?;
        let mut acc = ParamVector::zeros(first.len());
        for v in vectors {
            acc.add_scaled(v, 1.0)?;
        }
        Ok(acc.scaled(1.0 / vectors.len() as f64))
    }

    /// Unit-norm copy; returned unchanged when the norm is below `eps`.
    pub fn normalized(&self, eps: f64) -> ParamVector {
        let n = self.norm();
        if n < eps {
            self.clone()
        } else {
            self.scaled(1.0 / n)
        }
    }
}

/// Offsets of one dense layer inside a flat parameter vector. Weights are
/// stored row-major as `[fan_in x fan_out]`, followed by the bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSpec {
    pub w_offset: usize,
    pub b_offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSpec {
    fn end(&self) -> usize {
        self.b_offset + self.fan_out
    }
}

/// Architecture of the two-part model: encoder widths followed by a linear
/// head over `num_classes`. The embedding dimension is the last encoder
/// width (the input dimension when the encoder is empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    input_dim: usize,
    encoder_layer_dims: Vec<usize>,
    embedding_dim: usize,
    num_classes: usize,
}

impl ModelShape {
    pub fn new(
        input_dim: usize,
        encoder_layer_dims: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Config("model dims must be nonzero".into()));
        }
        if encoder_layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("encoder layer widths must be nonzero".into()));
        }
        let embedding_dim = *encoder_layer_dims.last().unwrap_or(&input_dim);
        Ok(ModelShape {
            input_dim,
            encoder_layer_dims,
            embedding_dim,
            num_classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn encoder_layer_dims(&self) -> &[usize] {
        &self.encoder_layer_dims
    }

    pub(crate) fn encoder_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::with_capacity(self.encoder_layer_dims.len());
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        for &fan_out in &self.encoder_layer_dims {
            let spec = LayerSpec {
                w_offset: offset,
                b_offset: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            };
            offset = spec.end();
            fan_in = fan_out;
            layers.push(spec);
        }
        layers
    }

    pub(crate) fn head_layer(&self) -> LayerSpec {
        let offset = self.encoder_param_count();
        LayerSpec {
            w_offset: offset,
            b_offset: offset + self.embedding_dim * self.num_classes,
            fan_in: self.embedding_dim,
            fan_out: self.num_classes,
        }
    }

    /// Number of encoder parameters; they occupy the leading slice of the
    /// flat vector, with head parameters after.
    pub fn encoder_param_count(&self) -> usize {
        self.encoder_layers().last().map(|l| l.end()).unwrap_or(0)
    }

    /// Contiguous per-layer ranges (encoder layers then head) tiling
    /// `0..param_count()` exactly.
    pub fn layer_param_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges: Vec<std::ops::Range<usize>> = self
            .encoder_layers()
            .iter()
            .map(|l| l.w_offset..l.end())
            .collect();
        let head = self.head_layer();
        ranges.push(head.w_offset..head.end());
        ranges
    }

    pub fn param_count(&self) -> usize {
        self.head_layer().end()
    }
}

/// A labelled mini-batch of input rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Empty("batch with no samples".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "batch has {} rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Glorot-uniform weight init (biases zero), seeded.
pub fn init_params(shape: &ModelShape, seed: u64) -> ParamVector {
    let mut rng = seeds::rng(seed, &[seeds::purpose::PARAM_INIT]);
    let mut values = vec![0.0; shape.param_count()];
    let mut layers = shape.encoder_layers();
    layers.push(shape.head_layer());
    for layer in layers {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut values[layer.w_offset..layer.b_offset] {
            *w = rng.gen_range(-bound..bound);
        }
    }
    ParamVector(values)
}

fn check_model_inputs(params: &ParamVector, shape: &ModelShape, inputs: &Matrix) -> Result<()> {
    if params.len() != shape.param_count() {
        return Err(Error::Shape(format!(
            "params length {} does not match shape parameter count {}",
            params.len(),
            shape.param_count()
        )));
    }
    if inputs.cols() != shape.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} does not match model input dim {}",
            inputs.cols(),
            shape.input_dim()
        )));
    }
    if !inputs.is_finite() {
        return Err(Error::Numeric("non-finite values in batch inputs".into()));
    }
    if !params.is_finite() {
        return Err(Error::Numeric("non-finite values in parameters".into()));
    }
    Ok(())
}

fn check_labels(shape: &ModelShape, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape.num_classes()) {
        return Err(Error::Shape(format!(
            "label {} out of range for {} classes",
            bad,
            shape.num_classes()
        )));
    }
    Ok(())
}

fn linear(inputs: &Matrix, params: &[f64], layer: &LayerSpec) -> Matrix {
    let n = inputs.rows();
    let mut out = Matrix::zeros(n, layer.fan_out);
    let w = &params[layer.w_offset..layer.b_offset];
    let b = &params[layer.b_offset..layer.b_offset + layer.fan_out];
    for r in 0..n {
        let x = inputs.row(r);
        let o = out.row_mut(r);
        o.copy_from_slice(b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * layer.fan_out..(i + 1) * layer.fan_out];
            for (oj, wj) in o.iter_mut().zip(wrow) {
                *oj += xi * wj;
            }
        }
    }
    out
}

fn tanh_in_place(m: &mut Matrix) {
    for r in 0..m.rows() {
        for v in m.row_mut(r) {
            *v = v.tanh();
        }
    }
}

/// Encoder activations, one matrix per encoder layer (post-tanh). Empty for
/// an identity encoder.
fn encoder_activations(params: &ParamVector, shape: &ModelShape, inputs: &Matrix) -> Vec<Matrix> {
    let mut acts: Vec<Matrix> = Vec::with_capacity(shape.encoder_layer_dims().len());
    for layer in shape.encoder_layers() {
        let x = acts.last().unwrap_or(inputs);
        let mut z = linear(x, params.values(), &layer);
        tanh_in_place(&mut z);
        acts.push(z);
    }
    acts
}

/// Per-row log-softmax cross-entropy; returns (mean loss, softmax matrix).
fn softmax_ce(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut probs = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let p = probs.row_mut(r);
        for (j, &l) in row.iter().enumerate() {
            let e = (l - max).exp();
            p[j] = e;
            sum += e;
        }
        for v in p.iter_mut() {
            *v /= sum;
        }
        loss += max + sum.ln() - row[labels[r]];
    }
    (loss / n as f64, probs)
}

/// Output of a full forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub embeddings: Matrix,
    pub logits: Matrix,
    pub loss: f64,
}

/// Forward pass: encoder embeddings, head logits, mean cross-entropy loss.
pub fn forward(params: &ParamVector, shape: &ModelShape, batch: &Batch) -> Result<ForwardOutput> {
    check_model_inputs(params, shape, &batch.inputs)?;
    check_labels(shape, &batch.labels)?;
    let acts = encoder_activations(params, shape, &batch.inputs);
    let embeddings = acts.last().unwrap_or(&batch.inputs).clone();
    let logits = linear(&embeddings, params.values(), &shape.head_layer());
    let (loss, _) = softmax_ce(&logits, &batch.labels);
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss in forward pass".into()));
    }
    Ok(ForwardOutput {
        embeddings,
        logits,
        loss,
    })
}

/// Encoder-only forward pass (no labels needed).
pub fn encoder_forward(params: &ParamVector, shape: &ModelShape, inputs: &Matrix) -> Result<Matrix> {
    check_model_inputs(params, shape, inputs)?;
    let acts = encoder_activations(params, shape, inputs);
    Ok(acts.last().unwrap_or(inputs).clone())
}

/// Backprop through the tanh encoder given `d_last` = dL/d(embeddings).
/// Writes encoder weight/bias gradients into `grad`.
fn encoder_chain(
    params: &ParamVector,
    shape: &ModelShape,
    inputs: &Matrix,
    acts: &[Matrix],
    d_last: Matrix,
    grad: &mut [f64],
) {
    let layers = shape.encoder_layers();
    let mut d_act = d_last;
    for (k, layer) in layers.iter().enumerate().rev() {
        let a = &acts[k];
        let x = if k == 0 { inputs } else { &acts[k - 1] };
        let n = a.rows();
        // dz = d_act * (1 - a^2)
        let mut dz = d_act;
        for r in 0..n {
            let arow = a.row(r);
            for (v, &av) in dz.row_mut(r).iter_mut().zip(arow) {
                *v *= 1.0 - av * av;
            }
        }
        // dW += x^T dz ; db += column sums of dz
        for r in 0..n {
            let xr = x.row(r);
            let dzr = dz.row(r);
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow =
                    &mut grad[layer.w_offset + i * layer.fan_out..layer.w_offset + (i + 1) * layer.fan_out];
                for (g, &d) in wrow.iter_mut().zip(dzr) {
                    *g += xi * d;
                }
            }
            let brow = &mut grad[layer.b_offset..layer.b_offset + layer.fan_out];
            for (g, &d) in brow.iter_mut().zip(dzr) {
                *g += d;
            }
        }
        if k == 0 {
            break;
        }
        // dx = dz W^T
        let w = &params.values()[layer.w_offset..layer.b_offset];
        let mut dx = Matrix::zeros(n, layer.fan_in);
        for r in 0..n {
            let dzr = dz.row(r);
            let dxr = dx.row_mut(r);
            for (i, dxv) in dxr.iter_mut().enumerate() {
                let wrow = &w[i * layer.fan_out..(i + 1) * layer.fan_out];
                *dxv = crate::linalg::dot(dzr, wrow);
            }
        }
        d_act = dx;
    }
}

/// Gradient of the mean cross-entropy loss with respect to every parameter.
pub fn backward(params: &ParamVector, shape: &ModelShape, batch: &Batch) -> Result<ParamVector> {
    check_model_inputs(params, shape, &batch.inputs)?;
    check_labels(shape, &batch.labels)?;
    let acts = encoder_activations(params, shape, &batch.inputs);
    let embeddings = acts.last().unwrap_or(&batch.inputs);
    let head = shape.head_layer();
    let logits = linear(embeddings, params.values(), &head);
    let (_, mut probs) = softmax_ce(&logits, &batch.labels);
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let row = probs.row_mut(r);
        row[batch.labels[r]] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    let mut grad = vec![0.0; shape.param_count()];
    // Head gradients and dL/d(embeddings).
    let mut d_emb = Matrix::zeros(n, shape.embedding_dim());
    let w = &params.values()[head.w_offset..head.b_offset];
    for r in 0..n {
        let e = embeddings.row(r);
        let dl = probs.row(r);
        for (i, &ei) in e.iter().enumerate() {
            let wrow = &mut grad[head.w_offset + i * head.fan_out..head.w_offset + (i + 1) * head.fan_out];
            for (g, &d) in wrow.iter_mut().zip(dl) {
                *g += ei * d;
            }
        }
        let brow = &mut grad[head.b_offset..head.b_offset + head.fan_out];
        for (g, &d) in brow.iter_mut().zip(dl) {
            *g += d;
        }
        let de = d_emb.row_mut(r);
        for (i, dev) in de.iter_mut().enumerate() {
            let wrow = &w[i * head.fan_out..(i + 1) * head.fan_out];
            *dev = crate::linalg::dot(dl, wrow);
        }
    }
    encoder_chain(params, shape, &batch.inputs, &acts, d_emb, &mut grad);
    let grad = ParamVector(grad);
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient in backward pass".into()));
    }
    Ok(grad)
}

/// Loss signal flowing into the encoder: the inputs that produced a set of
/// embeddings together with dL/d(embeddings) for those rows.
#[derive(Debug, Clone)]
pub struct EncoderGradSignal {
    pub inputs: Matrix,
    pub d_embeddings: Matrix,
}

impl EncoderGradSignal {
    pub fn new(inputs: Matrix, d_embeddings: Matrix) -> Result<Self> {
        if inputs.rows() != d_embeddings.rows() {
            return Err(Error::Shape(format!(
                "signal rows {} vs {}",
                inputs.rows(),
                d_embeddings.rows()
            )));
        }
        Ok(EncoderGradSignal {
            inputs,
            d_embeddings,
        })
    }
}

/// Gradient restricted to encoder parameters; the head slice is exactly zero.
pub fn encoder_backward(
    params: &ParamVector,
    shape: &ModelShape,
    signal: &EncoderGradSignal,
) -> Result<ParamVector> {
    check_model_inputs(params, shape, &signal.inputs)?;
    if signal.d_embeddings.cols() != shape.embedding_dim() {
        return Err(Error::Shape(format!(
            "signal embedding width {} vs model embedding dim {}",
            signal.d_embeddings.cols(),
            shape.embedding_dim()
        )));
    }
    if !signal.d_embeddings.is_finite() {
        return Err(Error::Numeric("non-finite loss signal".into()));
    }
    let acts = encoder_activations(params, shape, &signal.inputs);
    let mut grad = vec![0.0; shape.param_count()];
    encoder_chain(
        params,
        shape,
        &signal.inputs,
        &acts,
        signal.d_embeddings.clone(),
        &mut grad,
    );
    let grad = ParamVector(grad);
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite encoder gradient".into()));
    }
    Ok(grad)
}

/// Cross-entropy gradient of a single embedding fed directly to the head.
/// Encoder slice of the result is exactly zero.
pub fn head_gradient(
    params: &ParamVector,
    shape: &ModelShape,
    embedding: &[f64],
    label: usize,
) -> Result<ParamVector> {
    if embedding.len() != shape.embedding_dim() {
        return Err(Error::Shape(format!(
            "embedding length {} vs model embedding dim {}",
            embedding.len(),
            shape.embedding_dim()
        )));
    }
    check_labels(shape, &[label])?;
    let head = shape.head_layer();
    let logits = linear(
        &Matrix::from_rows(&[embedding.to_vec()])?,
        params.values(),
        &head,
    );
    let (_, mut probs) = softmax_ce(&logits, &[label]);
    let dl = probs.row_mut(0);
    dl[label] -= 1.0;
    let mut grad = vec![0.0; shape.param_count()];
    for (i, &ei) in embedding.iter().enumerate() {
        let wrow = &mut grad[head.w_offset + i * head.fan_out..head.w_offset + (i + 1) * head.fan_out];
        for (g, &d) in wrow.iter_mut().zip(dl.iter()) {
            *g += ei * d;
        }
    }
    let brow = &mut grad[head.b_offset..head.b_offset + head.fan_out];
    for (g, &d) in brow.iter_mut().zip(dl.iter()) {
        *g += d;
    }
    Ok(ParamVector(grad))
}

/// Central finite differences of a scalar function of the parameters.
/// Independent of the backprop path: only calls `f`.
pub fn finite_difference_gradient<F>(f: F, params: &ParamVector, step: f64) -> ParamVector
where
    F: Fn(&ParamVector) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.0[i];
        probe.0[i] = orig + step;
        let up = f(&probe);
        probe.0[i] = orig - step;
        let down = f(&probe);
        probe.0[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    ParamVector(grad)
}

/// Max relative error between an analytic gradient and finite differences.
pub fn gradient_check<F>(f: F, params: &ParamVector, analytic: &ParamVector, step: f64) -> f64
where
    F: Fn(&ParamVector) -> f64,
{
    let numeric = finite_difference_gradient(f, params, step);
    analytic
        .values()
        .iter()
        .zip(numeric.values())
        .map(|(a, n)| {
            let denom = a.abs().max(n.abs()).max(1e-8);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn fixed_batch(shape: &ModelShape, n: usize, seed: u64) -> Batch {
        let mut rng = seeds::rng(seed, &[99]);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..shape.input_dim())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(0..shape.num_classes()))
            .collect();
        Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn zero_weight_model_gives_uniform_loss() {
        let shape = ModelShape::new(4, vec![3], 5).unwrap();
        let params = ParamVector::zeros(shape.param_count());
        let batch = fixed_batch(&shape, 6, 1);
        let out = forward(&params, &shape, &batch).unwrap();
        assert_abs_diff_eq!(out.loss, (5.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn dominant_true_logit_drives_loss_to_zero() {
        // Identity encoder, one sample; push the true-class head bias very high.
        let shape = ModelShape::new(2, vec![], 3).unwrap();
        let mut params = ParamVector::zeros(shape.param_count());
        let head = shape.head_layer();
        params.values_mut()[head.b_offset + 1] = 60.0;
        let batch = Batch::new(Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap(), vec![1]).unwrap();
        let out = forward(&params, &shape, &batch).unwrap();
        assert!(out.loss < 1e-9, "loss {} not near zero", out.loss);
    }

    /// Straight-line re-implementation of the forward math, kept independent
    /// of the library path (explicit nested loops, no shared helpers).
    fn oracle_forward_loss(params: &ParamVector, shape: &ModelShape, batch: &Batch) -> f64 {
        let p = params.values();
        let mut total = 0.0;
        for r in 0..batch.len() {
            let mut x: Vec<f64> = batch.inputs.row(r).to_vec();
            let mut offset = 0;
            let mut fan_in = shape.input_dim();
            for &fan_out in shape.encoder_layer_dims() {
                let mut y = vec![0.0; fan_out];
                for (j, yv) in y.iter_mut().enumerate() {
                    let mut acc = p[offset + fan_in * fan_out + j];
                    for (i, xv) in x.iter().enumerate() {
                        acc += xv * p[offset + i * fan_out + j];
                    }
                    *yv = acc.tanh();
                }
                offset += fan_in * fan_out + fan_out;
                fan_in = fan_out;
                x = y;
            }
            let classes = shape.num_classes();
            let mut logits = vec![0.0; classes];
            for (j, lv) in logits.iter_mut().enumerate() {
                let mut acc = p[offset + fan_in * classes + j];
                for (i, xv) in x.iter().enumerate() {
                    acc += xv * p[offset + i * classes + j];
                }
                *lv = acc;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            total += max + sum.ln() - logits[batch.labels[r]];
        }
        total / batch.len() as f64
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let shape = ModelShape::new(5, vec![4, 3], 4).unwrap();
        let params = init_params(&shape, 42);
        let batch = fixed_batch(&shape, 4, 42);
        let out = forward(&params, &shape, &batch).unwrap();
        let expected = oracle_forward_loss(&params, &shape, &batch);
        assert_abs_diff_eq!(out.loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_batch_leaves_gradient_unchanged() {
        let shape = ModelShape::new(3, vec![4], 3).unwrap();
        let params = init_params(&shape, 7);
        let batch = fixed_batch(&shape, 5, 3);
        let mut dup_rows: Vec<Vec<f64>> = Vec::new();
        let mut dup_labels = Vec::new();
        for r in 0..batch.len() {
            for _ in 0..2 {
                dup_rows.push(batch.inputs.row(r).to_vec());
                dup_labels.push(batch.labels[r]);
            }
        }
        let dup = Batch::new(Matrix::from_rows(&dup_rows).unwrap(), dup_labels).unwrap();
        let g1 = backward(&params, &shape, &batch).unwrap();
        let g2 = backward(&params, &shape, &dup).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let shape = ModelShape::new(4, vec![5, 4, 3], 3).unwrap();
        let params = init_params(&shape, 11);
        let batch = fixed_batch(&shape, 8, 21);
        let analytic = backward(&params, &shape, &batch).unwrap();
        let err = gradient_check(
            |p| forward(p, &shape, &batch).unwrap().loss,
            &params,
            &analytic,
            1e-4,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_inputs_kill_first_layer_weight_gradient() {
        let shape = ModelShape::new(3, vec![4, 2], 2).unwrap();
        let mut params = init_params(&shape, 5);
        // Zero the first-layer bias so its activations are exactly zero too.
        let first = shape.encoder_layers()[0];
        for v in &mut params.values_mut()[first.b_offset..first.b_offset + first.fan_out] {
            *v = 0.0;
        }
        let batch = Batch::new(Matrix::zeros(4, 3), vec![0, 1, 0, 1]).unwrap();
        let grad = backward(&params, &shape, &batch).unwrap();
        for &g in &grad.values()[first.w_offset..first.b_offset] {
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn encoder_backward_zero_signal_gives_zero_gradient() {
        let shape = ModelShape::new(3, vec![4], 2).unwrap();
        let params = init_params(&shape, 9);
        let inputs = fixed_batch(&shape, 3, 9).inputs;
        let signal =
            EncoderGradSignal::new(inputs, Matrix::zeros(3, shape.embedding_dim())).unwrap();
        let grad = encoder_backward(&params, &shape, &signal).unwrap();
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn encoder_backward_head_slice_is_exactly_zero() {
        let shape = ModelShape::new(3, vec![4, 3], 4).unwrap();
        let params = init_params(&shape, 13);
        let batch = fixed_batch(&shape, 4, 13);
        let mut rng = seeds::rng(13, &[7]);
        let d_rows: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                (0..shape.embedding_dim())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let signal = EncoderGradSignal::new(
            batch.inputs.clone(),
            Matrix::from_rows(&d_rows).unwrap(),
        )
        .unwrap();
        let grad = encoder_backward(&params, &shape, &signal).unwrap();
        for &g in &grad.values()[shape.encoder_param_count()..] {
            assert_eq!(g, 0.0);
        }
        // And the encoder slice is not all zero for a nonzero signal.
        assert!(grad.values()[..shape.encoder_param_count()]
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn head_gradient_encoder_slice_is_zero() {
        let shape = ModelShape::new(3, vec![4], 3).unwrap();
        let params = init_params(&shape, 3);
        let emb = vec![0.1, -0.4, 0.2, 0.9][..shape.embedding_dim()].to_vec();
        let grad = head_gradient(&params, &shape, &emb, 2).unwrap();
        for &g in &grad.values()[..shape.encoder_param_count()] {
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let shape = ModelShape::new(3, vec![2], 2).unwrap();
        let params = ParamVector::zeros(shape.param_count() + 1);
        let batch = Batch::new(Matrix::zeros(1, 3), vec![0]).unwrap();
        assert!(matches!(
            forward(&params, &shape, &batch),
            Err(Error::Shape(_))
        ));
        let params = ParamVector::zeros(shape.param_count());
        let bad = Batch::new(Matrix::zeros(1, 4), vec![0]).unwrap();
        assert!(matches!(forward(&params, &shape, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_inputs_are_numeric_errors() {
        let shape = ModelShape::new(2, vec![], 2).unwrap();
        let params = ParamVector::zeros(shape.param_count());
        let batch = Batch::new(
            Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap(),
            vec![0],
        )
        .unwrap();
        assert!(matches!(
            forward(&params, &shape, &batch),
            Err(Error::Numeric(_))
        ));
    }
}
