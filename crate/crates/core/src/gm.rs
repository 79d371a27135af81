//! Gradient matching: find simplex weights that reconcile a set of task or
//! client gradients, then emit the mean gradient plus a bounded correction
//! along the weighted combination.
//!
//! The inner problem minimizes `J(w) = (w G) . m + kappa * |m| * |w G|` over
//! the probability simplex, where `m` is the mean gradient and the rows of
//! `G` are the input gradients. `J` is convex, so a monotone projected
//! gradient method with heavy-ball momentum converges; steps that would
//! increase `J` are rejected and retried with backtracking so the objective
//! trace never rises.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamVector;

/// Nonnegative weights summing to one, one per input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights {
    gamma: Vec<f64>,
}

impl SimplexWeights {
    /// Uniform weights `1/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Shape("simplex over zero coordinates".into()));
        }
        Ok(SimplexWeights {
            gamma: vec![1.0 / n as f64; n],
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// Sum-to-one within 1e-9 and all entries nonnegative.
    pub fn is_feasible(&self) -> bool {
        let sum: f64 = self.gamma.iter().sum();
        (sum - 1.0).abs() <= 1e-9 && self.gamma.iter().all(|&g| g >= 0.0)
    }
}

/// Configuration for the inner simplex solver and the correction radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GMConfig {
    /// Search radius: the correction norm is `kappa * |mean gradient|`.
    pub kappa: f64,
    /// Base step size of the inner solver.
    pub inner_lr: f64,
    /// Heavy-ball momentum in [0, 1).
    pub momentum: f64,
    /// Number of inner iterations.
    pub inner_rounds: usize,
    /// Decay the step size every this many iterations.
    pub scheduler_step: usize,
    /// Multiplicative step-size decay factor in (0, 1].
    pub scheduler_gamma: f64,
    /// Normalize each input gradient to unit norm before matching.
    pub normalize_inputs: bool,
    /// Norms below this are treated as zero (degenerate inputs).
    pub degenerate_eps: f64,
}

impl Default for GMConfig {
    fn default() -> Self {
        GMConfig {
            kappa: 0.5,
            inner_lr: 25.0,
            momentum: 0.9,
            inner_rounds: 100,
            scheduler_step: 30,
            scheduler_gamma: 0.5,
            normalize_inputs: true,
            degenerate_eps: 1e-12,
        }
    }
}

impl GMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa < 0.0 {
            return Err(Error::Config("kappa must be nonnegative".into()));
        }
        if self.inner_lr <= 0.0 {
            return Err(Error::Config("inner_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.inner_rounds == 0 {
            return Err(Error::Config("inner_rounds must be at least 1".into()));
        }
        if !(self.scheduler_gamma > 0.0 && self.scheduler_gamma <= 1.0) {
            return Err(Error::Config("scheduler_gamma must be in (0, 1]".into()));
        }
        if self.degenerate_eps <= 0.0 {
            return Err(Error::Config("degenerate_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Result<SimplexWeights> {
    if v.is_empty() {
        return Err(Error::Shape("projection of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite input to simplex projection".into()));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            threshold = t;
        }
    }
    let gamma: Vec<f64> = v.iter().map(|&x| (x - threshold).max(0.0)).collect();
    Ok(SimplexWeights { gamma })
}

/// Precomputed quadratic form for the inner objective: the Gram matrix of
/// the gradients and their inner products with the mean.
struct InnerProblem {
    n: usize,
    gram: Vec<f64>,
    mean_dots: Vec<f64>,
    radius: f64, // kappa * |mean|
}

impl InnerProblem {
    fn new(gradients: &[ParamVector], mean: &ParamVector, kappa: f64) -> Self {
        let n = gradients.len();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let d = gradients[i].dot(&gradients[j]);
                gram[i * n + j] = d;
                gram[j * n + i] = d;
            }
        }
        let mean_dots: Vec<f64> = gradients.iter().map(|g| g.dot(mean)).collect();
        InnerProblem {
            n,
            gram,
            mean_dots,
            radius: kappa * mean.norm(),
        }
    }

    fn combo_norm(&self, w: &[f64]) -> f64 {
        let mut q = 0.0;
        for i in 0..self.n {
            let mut row = 0.0;
            for j in 0..self.n {
                row += self.gram[i * self.n + j] * w[j];
            }
            q += w[i] * row;
        }
        q.max(0.0).sqrt()
    }

    fn objective(&self, w: &[f64]) -> f64 {
        crate::linalg::dot(w, &self.mean_dots) + self.radius * self.combo_norm(w)
    }

    /// Gradient of the objective; the norm term's subgradient at zero is zero.
    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let norm = self.combo_norm(w);
        let mut g = self.mean_dots.clone();
        if norm > 0.0 {
            for i in 0..self.n {
                let mut row = 0.0;
                for j in 0..self.n {
                    row += self.gram[i * self.n + j] * w[j];
                }
                g[i] += self.radius * row / norm;
            }
        }
        g
    }
}

fn check_gradients(gradients: &[ParamVector]) -> Result<usize> {
    let first = gradients
        .first()
        .ok_or_else(|| Error::Shape("gradient matching over zero gradients".into()))?;
    let dim = first.len();
    for g in gradients {
        if g.len() != dim {
            return Err(Error::Shape(format!(
                "gradient lengths differ: {} vs {}",
                g.len(),
                dim
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric("non-finite input gradient".into()));
        }
    }
    Ok(dim)
}

/// Solve for the simplex weights, returning the per-iteration objective
/// trace alongside the solution.
pub fn solve_gamma_traced(
    gradients: &[ParamVector],
    mean: &ParamVector,
    cfg: &GMConfig,
) -> Result<(SimplexWeights, Vec<f64>)> {
    let dim = check_gradients(gradients)?;
    if mean.len() != dim {
        return Err(Error::Shape("mean gradient length mismatch".into()));
    }
    cfg.validate()?;
    let n = gradients.len();
    let mut weights = SimplexWeights::uniform(n)?;
    let problem = InnerProblem::new(gradients, mean, cfg.kappa);
    let mut current = problem.objective(weights.as_slice());
    let mut trace = vec![current];
    if n == 1 {
        return Ok((weights, trace));
    }
    let mut velocity = vec![0.0; n];
    let mut lr = cfg.inner_lr;
    for iter in 0..cfg.inner_rounds {
        if iter > 0 && cfg.scheduler_step > 0 && iter % cfg.scheduler_step == 0 {
            lr *= cfg.scheduler_gamma;
        }
        let grad = problem.gradient(weights.as_slice());
        let accept_tol = 1e-12 * (1.0 + current.abs());
        // Momentum candidate first.
        let proposal: Vec<f64> = weights
            .as_slice()
            .iter()
            .zip(&velocity)
            .zip(&grad)
            .map(|((&w, &v), &g)| w + cfg.momentum * v - lr * g)
            .collect();
        let candidate = project_simplex(&proposal)?;
        let cand_obj = problem.objective(candidate.as_slice());
        if cand_obj <= current + accept_tol {
            for ((v, &new), &old) in velocity
                .iter_mut()
                .zip(candidate.as_slice())
                .zip(weights.as_slice())
            {
                *v = new - old;
            }
            weights = candidate;
            current = cand_obj.min(current);
        } else {
            // Reset momentum and backtrack a plain projected step.
            velocity.iter_mut().for_each(|v| *v = 0.0);
            let mut step = lr;
            for _ in 0..60 {
                let proposal: Vec<f64> = weights
                    .as_slice()
                    .iter()
                    .zip(&grad)
                    .map(|(&w, &g)| w - step * g)
                    .collect();
                let candidate = project_simplex(&proposal)?;
                let cand_obj = problem.objective(candidate.as_slice());
                if cand_obj < current {
                    for ((v, &new), &old) in velocity
                        .iter_mut()
                        .zip(candidate.as_slice())
                        .zip(weights.as_slice())
                    {
                        *v = new - old;
                    }
                    weights = candidate;
                    current = cand_obj;
                    break;
                }
                step *= 0.5;
            }
        }
        debug_assert!(weights.is_feasible());
        trace.push(current);
    }
    Ok((weights, trace))
}

/// Simplex weights minimizing the matching objective.
pub fn solve_gamma(
    gradients: &[ParamVector],
    mean: &ParamVector,
    cfg: &GMConfig,
) -> Result<SimplexWeights> {
    solve_gamma_traced(gradients, mean, cfg).map(|(w, _)| w)
}

/// Result of a gradient match with the solved weights exposed.
#[derive(Debug, Clone)]
pub struct MatchDetail {
    pub output: ParamVector,
    pub gamma: SimplexWeights,
    pub mean: ParamVector,
}

/// Matched aggregate gradient: the mean of the (optionally normalized)
/// inputs plus a correction of norm `kappa * |mean|` along the weighted
/// combination. Degenerate inputs fall back to the mean.
pub fn gradient_match_detail(gradients: &[ParamVector], cfg: &GMConfig) -> Result<MatchDetail> {
    check_gradients(gradients)?;
    cfg.validate()?;
    let inputs: Vec<ParamVector> = if cfg.normalize_inputs {
        gradients
            .iter()
            .map(|g| g.normalized(cfg.degenerate_eps))
            .collect()
    } else {
        gradients.to_vec()
    };
    let mean = ParamVector::mean(&inputs)?;
    let mean_norm = mean.norm();
    let n = inputs.len();
    if cfg.kappa == 0.0 || mean_norm < cfg.degenerate_eps {
        return Ok(MatchDetail {
            output: mean.clone(),
            gamma: SimplexWeights::uniform(n)?,
            mean,
        });
    }
    let gamma = solve_gamma(&inputs, &mean, cfg)?;
    let mut combo = ParamVector::zeros(mean.len());
    for (g, &w) in inputs.iter().zip(gamma.as_slice()) {
        combo.add_scaled(g, w)?;
    }
    let combo_norm = combo.norm();
    if combo_norm < cfg.degenerate_eps {
        return Ok(MatchDetail {
            output: mean.clone(),
            gamma,
            mean,
        });
    }
    let mut output = mean.clone();
    output.add_scaled(&combo, cfg.kappa * mean_norm / combo_norm)?;
    if !output.is_finite() {
        return Err(Error::Numeric("non-finite matched gradient".into()));
    }
    Ok(MatchDetail {
        output,
        gamma,
        mean,
    })
}

/// As [`gradient_match_detail`] but returning only the aggregate gradient.
pub fn gradient_match(gradients: &[ParamVector], cfg: &GMConfig) -> Result<ParamVector> {
    gradient_match_detail(gradients, cfg).map(|d| d.output)
}

/// Exhaustive grid search over the simplex at the given resolution,
/// minimizing the matching objective. Small instances only; used as an
/// independent oracle by tests and kept free of the solver path.
pub fn grid_search_objective(
    gradients: &[ParamVector],
    mean: &ParamVector,
    kappa: f64,
    grid_steps: usize,
) -> Result<f64> {
    check_gradients(gradients)?;
    let n = gradients.len();
    let problem = InnerProblem::new(gradients, mean, kappa);
    let mut best = f64::INFINITY;
    let mut point = vec![0usize; n];
    // Enumerate compositions of `grid_steps` into n nonnegative parts.
    fn recurse(
        problem: &InnerProblem,
        point: &mut Vec<usize>,
        idx: usize,
        remaining: usize,
        grid_steps: usize,
        best: &mut f64,
    ) {
        if idx + 1 == point.len() {
            point[idx] = remaining;
            let w: Vec<f64> = point
                .iter()
                .map(|&c| c as f64 / grid_steps as f64)
                .collect();
            let obj = problem.objective(&w);
            if obj < *best {
                *best = obj;
            }
            return;
        }
        for c in 0..=remaining {
            point[idx] = c;
            recurse(problem, point, idx + 1, remaining - c, grid_steps, best);
        }
    }
    recurse(&problem, &mut point, 0, grid_steps, grid_steps, &mut best);
    Ok(best)
}
