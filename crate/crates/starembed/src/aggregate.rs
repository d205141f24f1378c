//! Post-hoc aggregation baselines and semantic balancing.
//!
//! Aggregation combines independently encoded neighbor embeddings (uniform
//! mean or cosine-softmax weighted mean). Balancing interpolates a target's
//! individual embedding with a structure-aware one:
//!
//! ```text
//! h = (1 - alpha) * h_individual + alpha * h_struct
//! ```
//!
//! All functions are pure. Inputs are unit vectors by convention; outputs are
//! renormalized so downstream cosine scoring treats every alpha alike.

use crate::error::{Error, Result};
use crate::model::{cosine, EmbedKind, Embedding};

/// Interpolation settings for [`balance`].
#[derive(Debug, Clone, Copy)]
pub struct BalanceSpec {
    /// Weight of the structural embedding, in `[0, 1]`.
    pub alpha: f64,
    /// Normalize both inputs before interpolating (default on).
    pub normalize_inputs: bool,
    /// Renormalize the interpolated output (default on).
    pub renormalize_output: bool,
}

impl BalanceSpec {
    pub fn new(alpha: f64) -> Result<BalanceSpec> {
        if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(BalanceSpec {
            alpha,
            normalize_inputs: true,
            renormalize_output: true,
        })
    }
}

fn sorted_by_id<'a>(neighbors: &[(&'a str, &'a [f32])]) -> Vec<(&'a str, &'a [f32])> {
    let mut v = neighbors.to_vec();
    v.sort_by(|a, b| a.0.cmp(b.0));
    v
}

fn check_dims(neighbors: &[(&str, &[f32])]) -> Result<usize> {
    let dim = neighbors
        .first()
        .ok_or(Error::EmptyInput("aggregation over zero neighbors"))?
        .1
        .len();
    if neighbors.iter().any(|(_, v)| v.len() != dim) {
        return Err(Error::Data("neighbor embeddings have mixed dimensions".into()));
    }
    Ok(dim)
}

/// Arithmetic mean of the neighbor embeddings, before renormalization.
/// Summation runs in ascending id order, so the result is exactly
/// permutation-invariant.
pub fn mean_pool_raw(neighbors: &[(&str, &[f32])]) -> Result<Vec<f32>> {
    let dim = check_dims(neighbors)?;
    let sorted = sorted_by_id(neighbors);
    let mut acc = vec![0.0f64; dim];
    for (_, v) in &sorted {
        for (a, &x) in acc.iter_mut().zip(*v) {
            *a += x as f64;
        }
    }
    let n = sorted.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Uniform average of neighbor embeddings, renormalized to unit length.
pub fn mean_pool(neighbors: &[(&str, &[f32])]) -> Result<Embedding> {
    let raw = mean_pool_raw(neighbors)?;
    Embedding::unit(raw, EmbedKind::MeanPool).map_err(|e| match e {
        Error::DegenerateNorm => Error::DegenerateMean,
        other => other,
    })
}

/// Softmax-normalized cosine similarities of each neighbor to the target.
/// Weights are positive and sum to 1.
pub fn cosine_softmax_weights(target: &[f32], neighbors: &[(&str, &[f32])]) -> Result<Vec<f64>> {
    check_dims(neighbors)?;
    let sorted = sorted_by_id(neighbors);
    let sims: Vec<f64> = sorted.iter().map(|(_, v)| cosine(target, v)).collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Similarity-weighted pooling: neighbors weighted by the softmax of their
/// cosine to the target, then renormalized.
pub fn weighted_pool(target: &[f32], neighbors: &[(&str, &[f32])]) -> Result<Embedding> {
    let dim = check_dims(neighbors)?;
    let sorted = sorted_by_id(neighbors);
    let weights = cosine_softmax_weights(target, neighbors)?;
    let mut acc = vec![0.0f64; dim];
    for ((_, v), w) in sorted.iter().zip(&weights) {
        for (a, &x) in acc.iter_mut().zip(*v) {
            *a += w * x as f64;
        }
    }
    let raw: Vec<f32> = acc.into_iter().map(|a| a as f32).collect();
    Embedding::unit(raw, EmbedKind::WeightedPool).map_err(|e| match e {
        Error::DegenerateNorm => Error::DegenerateMean,
        other => other,
    })
}

/// Convex interpolation between the individual and structural embeddings.
/// The endpoints return the (normalized) input unchanged.
pub fn balance(h_individual: &[f32], h_struct: &[f32], spec: &BalanceSpec) -> Result<Vec<f32>> {
    if h_individual.len() != h_struct.len() {
        return Err(Error::Data("balance inputs have different dimensions".into()));
    }
    let normalize = |v: &[f32]| -> Result<Vec<f32>> {
        if spec.normalize_inputs {
            Ok(Embedding::unit(v.to_vec(), EmbedKind::Individual)?.vector)
        } else {
            Ok(v.to_vec())
        }
    };
    let ind = normalize(h_individual)?;
    let st = normalize(h_struct)?;
    if spec.alpha == 0.0 {
        return Ok(ind);
    }
    if spec.alpha == 1.0 {
        return Ok(st);
    }
    let mixed: Vec<f32> = ind
        .iter()
        .zip(&st)
        .map(|(&a, &b)| ((1.0 - spec.alpha) * a as f64 + spec.alpha * b as f64) as f32)
        .collect();
    if spec.renormalize_output {
        Embedding::unit(mixed, EmbedKind::Individual)
            .map(|e| e.vector)
            .map_err(|e| match e {
                Error::DegenerateNorm => Error::DegenerateMean,
                other => other,
            })
    } else {
        Ok(mixed)
    }
}

/// Exhaustive alpha grid search: evaluates `score_fn` on `{0, step, ..., 1}`
/// and returns the best point, breaking ties toward the smaller alpha.
pub fn grid_search_alpha<F>(mut score_fn: F, step: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    let (alphas, _) = alpha_grid(step)?;
    let mut best: Option<(f64, f64)> = None;
    for alpha in alphas {
        let score = score_fn(alpha);
        if !score.is_finite() {
            return Err(Error::NonFiniteScore { alpha });
        }
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((alpha, score)),
        }
    }
    Ok(best.expect("grid is never empty"))
}

/// The grid points for a step, plus the step count. The step must divide 1
/// exactly in the grid sense (e.g. 0.02 gives 51 points).
pub fn alpha_grid(step: f64) -> Result<(Vec<f64>, usize)> {
    if !(step > 0.0 && step <= 1.0) || !step.is_finite() {
        return Err(Error::Config(format!("step {step} outside (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    if n == 0 || ((n as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("step {step} does not divide 1")));
    }
    let alphas = (0..=n).map(|i| i as f64 / n as f64).collect();
    Ok((alphas, n))
}

/// Default grid step used by the alpha search.
pub const DEFAULT_ALPHA_STEP: f64 = 0.02;
