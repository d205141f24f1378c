//! Dense block-masked attention reference.
//!
//! Computes one joint attention pass over several token blocks with an
//! explicit block-visibility mask and arbitrary (possibly duplicated)
//! position ids. Tests use it to certify the cached-KV encoders: the sparse
//! "bag of past KVs" computation must match this dense computation wherever
//! the mask agrees.
//!
//! This is a self-contained reference path: it reads the same weights but
//! reimplements norm, rotary, attention and MLP locally instead of calling
//! the code under test.

use crate::error::{Error, Result};
use crate::model::{HiddenStates, Weights};

/// One token block with its position ids.
#[derive(Debug, Clone)]
pub struct OracleBlock {
    pub tokens: Vec<u16>,
    pub positions: Vec<u32>,
}

impl OracleBlock {
    pub fn new(tokens: Vec<u16>, positions: Vec<u32>) -> Self {
        OracleBlock { tokens, positions }
    }

    /// Tokens at sequential positions starting from `start`.
    pub fn at_offset(tokens: Vec<u16>, start: u32) -> Self {
        let positions = (0..tokens.len() as u32).map(|i| i + start).collect();
        OracleBlock { tokens, positions }
    }
}

/// Block-level visibility: `allow[i][j]` lets block `i` attend to block `j`.
/// Must be lower-triangular with a true diagonal; attention within a block is
/// always causal.
#[derive(Debug, Clone)]
pub struct BlockMask {
    allow: Vec<Vec<bool>>,
}

impl BlockMask {
    pub fn new(allow: Vec<Vec<bool>>) -> Result<BlockMask> {
        for (i, row) in allow.iter().enumerate() {
            if row.len() != allow.len() {
                return Err(Error::Config("block mask must be square".into()));
            }
            if !row[i] {
                return Err(Error::Config(format!(
                    "block mask not realizable: diagonal entry {i} is false"
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if j > i && v {
                    return Err(Error::Config(format!(
                        "block mask not realizable: {i} would attend to later block {j}"
                    )));
                }
            }
        }
        Ok(BlockMask { allow })
    }

    /// Full causal visibility over `n` blocks.
    pub fn causal(n: usize) -> BlockMask {
        let allow = (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect();
        BlockMask { allow }
    }

    /// The parallel-context mask: `n_ctx` context blocks that see only
    /// themselves, then one target block that sees everything.
    pub fn parallel_contexts(n_ctx: usize) -> BlockMask {
        let n = n_ctx + 1;
        let allow = (0..n)
            .map(|i| (0..n).map(|j| if i == n - 1 { j <= i } else { j == i }).collect())
            .collect();
        BlockMask { allow }
    }

    fn allows(&self, from: usize, to: usize) -> bool {
        self.allow[from][to]
    }

    pub fn n_blocks(&self) -> usize {
        self.allow.len()
    }
}

const RMS_EPS: f32 = 1e-6;

fn ref_rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let mean_sq = x.iter().map(|&v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

fn ref_gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn ref_matvec(w: &[f32], x: &[f32], rows: usize) -> Vec<f32> {
    let cols = x.len();
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn ref_rope(head: &mut [f32], pos: u32, base: f32) {
    let half = head.len() / 2;
    for j in 0..half {
        let theta = pos as f64 * (base as f64).powf(-2.0 * j as f64 / head.len() as f64);
        let (sin, cos) = theta.sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let a = head[j];
        let b = head[j + half];
        head[j] = a * cos - b * sin;
        head[j + half] = a * sin + b * cos;
    }
}

/// One dense attention computation over all blocks jointly, masked at block
/// granularity, causal within each block. Returns hidden states for every
/// token in block order.
pub fn dense_oracle(
    weights: &Weights,
    blocks: &[OracleBlock],
    mask: &BlockMask,
) -> Result<HiddenStates> {
    if blocks.is_empty() {
        return Err(Error::EmptyInput("dense_oracle over zero blocks"));
    }
    if mask.n_blocks() != blocks.len() {
        return Err(Error::Config(format!(
            "mask covers {} blocks, got {}",
            mask.n_blocks(),
            blocks.len()
        )));
    }

    let cfg = weights.config();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.d_head();

    // flatten blocks
    let mut tokens: Vec<u16> = Vec::new();
    let mut positions: Vec<u32> = Vec::new();
    let mut block_of: Vec<usize> = Vec::new();
    for (b, block) in blocks.iter().enumerate() {
        if block.tokens.len() != block.positions.len() {
            return Err(Error::Config(format!(
                "block {b}: {} tokens but {} positions",
                block.tokens.len(),
                block.positions.len()
            )));
        }
        for (&t, &p) in block.tokens.iter().zip(&block.positions) {
            if p as usize >= cfg.max_pos {
                return Err(Error::PositionOverflow {
                    pos: p as usize,
                    max_pos: cfg.max_pos,
                });
            }
            tokens.push(t);
            positions.push(p);
            block_of.push(b);
        }
    }
    let total = tokens.len();
    if total == 0 {
        return Err(Error::EmptyInput("dense_oracle over zero tokens"));
    }

    let visible = |p: usize, q: usize| -> bool {
        let (bi, bj) = (block_of[p], block_of[q]);
        if bi == bj {
            q <= p
        } else {
            mask.allows(bi, bj)
        }
    };

    let mut x: Vec<Vec<f32>> = tokens
        .iter()
        .map(|&t| weights.token_embedding[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();

    let scale = 1.0 / (dh as f32).sqrt();
    for lw in &weights.layers {
        // projections with rotary applied per token
        let mut q_all: Vec<Vec<f32>> = Vec::with_capacity(total);
        let mut k_all: Vec<Vec<f32>> = Vec::with_capacity(total);
        let mut v_all: Vec<Vec<f32>> = Vec::with_capacity(total);
        for i in 0..total {
            let normed = ref_rms_norm(&x[i], &lw.attn_norm);
            let mut q = ref_matvec(&lw.wq, &normed, d);
            let mut k = ref_matvec(&lw.wk, &normed, d);
            let v = ref_matvec(&lw.wv, &normed, d);
            for h in 0..nh {
                ref_rope(&mut q[h * dh..(h + 1) * dh], positions[i], cfg.rope_base);
                ref_rope(&mut k[h * dh..(h + 1) * dh], positions[i], cfg.rope_base);
            }
            q_all.push(q);
            k_all.push(k);
            v_all.push(v);
        }

        for i in 0..total {
            let mut attn = vec![0.0f32; d];
            for h in 0..nh {
                let col = h * dh;
                let qi = &q_all[i][col..col + dh];
                let mut scores: Vec<(usize, f32)> = Vec::new();
                for j in 0..total {
                    if visible(i, j) {
                        let s = qi
                            .iter()
                            .zip(&k_all[j][col..col + dh])
                            .map(|(&a, &b)| a * b)
                            .sum::<f32>()
                            * scale;
                        scores.push((j, s));
                    }
                }
                let max = scores.iter().map(|&(_, s)| s).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for (_, s) in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (j, s) in &scores {
                    let w = s / sum;
                    for (o, &val) in attn[col..col + dh].iter_mut().zip(&v_all[*j][col..col + dh]) {
                        *o += w * val;
                    }
                }
            }
            let proj = ref_matvec(&lw.wo, &attn, d);
            for (xv, &p) in x[i].iter_mut().zip(&proj) {
                *xv += p;
            }
        }

        for i in 0..total {
            let normed = ref_rms_norm(&x[i], &lw.mlp_norm);
            let mut up = ref_matvec(&lw.w_up, &normed, 4 * d);
            for u in up.iter_mut() {
                *u = ref_gelu(*u);
            }
            let down = ref_matvec(&lw.w_down, &up, d);
            for (xv, &p) in x[i].iter_mut().zip(&down) {
                *xv += p;
            }
        }
    }

    let mut out = Vec::with_capacity(total * d);
    for row in &x {
        out.extend(ref_rms_norm(row, &weights.final_norm));
    }
    Ok(HiddenStates::new(out, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_context_cache, par_forward, KVCacheEntry};
    use crate::model::{forward, ModelConfig, Weights};
    use crate::tokenizer::tokenize;

    fn small_weights(seed: u64) -> Weights {
        Weights::init(&ModelConfig::small(seed)).unwrap()
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn single_block_equals_plain_forward() {
        let w = small_weights(42);
        let tokens = tokenize("degenerate mask case");
        let positions: Vec<u32> = (0..tokens.len() as u32).collect();
        let dense = dense_oracle(
            &w,
            &[OracleBlock::new(tokens.clone(), positions.clone())],
            &BlockMask::causal(1),
        )
        .unwrap();
        let (direct, _) = forward(&w, &tokens, &positions, None).unwrap();
        assert_eq!(dense.data(), direct.data());
    }

    #[test]
    fn parallel_mask_matches_par_forward() {
        let w = small_weights(42);
        let l_ctx = 32usize;
        let ctx_a = "context block a";
        let ctx_b = "another context b";
        let target = "target text";

        let entry_a = build_context_cache(&w, "a", ctx_a, l_ctx).unwrap();
        let entry_b = build_context_cache(&w, "b", ctx_b, l_ctx).unwrap();
        let entries: Vec<&KVCacheEntry> = vec![&entry_a, &entry_b];
        let target_tokens = tokenize(target);
        let (sparse, _) = par_forward(&w, &entries, l_ctx, &target_tokens).unwrap();

        let blocks = vec![
            OracleBlock::at_offset(tokenize(ctx_a), 0),
            OracleBlock::at_offset(tokenize(ctx_b), 0),
            OracleBlock::at_offset(target_tokens.clone(), l_ctx as u32),
        ];
        let dense = dense_oracle(&w, &blocks, &BlockMask::parallel_contexts(2)).unwrap();

        // compare the target block rows
        let t_ctx = tokenize(ctx_a).len() + tokenize(ctx_b).len();
        for (i, row) in (0..target_tokens.len()).enumerate() {
            let diff = max_abs_diff(sparse.row(i), dense.row(t_ctx + row));
            assert!(diff <= 1e-5, "row {i}: {diff}");
        }
    }

    #[test]
    fn sequential_blocks_match_concatenated_forward() {
        let w = small_weights(42);
        let ctx = tokenize("leading context");
        let tgt = tokenize("the target");
        let blocks = vec![
            OracleBlock::at_offset(ctx.clone(), 0),
            OracleBlock::at_offset(tgt.clone(), ctx.len() as u32),
        ];
        let dense = dense_oracle(&w, &blocks, &BlockMask::causal(2)).unwrap();

        let mut stream = ctx.clone();
        stream.extend(tgt.iter().copied());
        let positions: Vec<u32> = (0..stream.len() as u32).collect();
        let (joint, _) = forward(&w, &stream, &positions, None).unwrap();
        let diff = max_abs_diff(dense.data(), joint.data());
        assert!(diff <= 1e-5, "diff {diff}");
    }

    #[test]
    fn unrealizable_masks_are_rejected() {
        // upper-triangular visibility
        assert!(BlockMask::new(vec![vec![true, true], vec![false, true]]).is_err());
        // missing self-visibility
        assert!(BlockMask::new(vec![vec![false, false], vec![true, true]]).is_err());
        // non-square
        assert!(BlockMask::new(vec![vec![true], vec![true, true]]).is_err());
    }
}
