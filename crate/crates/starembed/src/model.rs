//! A compact decoder-only causal transformer with rotary positions.
//!
//! The model is deliberately small and deterministic: byte-level vocabulary,
//! seeded random weights, 32-bit arithmetic with max-subtracted softmax, and
//! per-layer KV exposure so callers can inject previously encoded segments as
//! past context. Pre-norm blocks with RMS norms and a GELU MLP.
//!
//! `forward` treats past KVs as an unordered bag: every new token attends to
//! all past entries regardless of their position ids (keys carry their rotary
//! rotation already), plus causally to the new tokens before it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, Tensor};
use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

const RMS_EPS: f32 = 1e-6;

/// Architecture and determinism parameters of the toy encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub rope_base: f32,
    pub max_pos: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            vocab: VOCAB_SIZE,
            rope_base: 10000.0,
            max_pos: 8192,
            seed,
        }
    }

    /// Small config used throughout the test suite: 2 layers, 4 heads, d=64.
    pub fn small(seed: u64) -> Self {
        ModelConfig::new(2, 4, 64, seed)
    }

    /// Larger config for demos and benches: 4 layers, 4 heads, d=128.
    pub fn demo(seed: u64) -> Self {
        ModelConfig::new(4, 4, 128, seed)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config(
                "n_layers, n_heads and d_model must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(Error::Config(format!(
                "d_head {} must be even for rotary pairs",
                self.d_head()
            )));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab {} is below the byte tokenizer's {VOCAB_SIZE}",
                self.vocab
            )));
        }
        if self.max_pos < 2 {
            return Err(Error::Config("max_pos must be at least 2".into()));
        }
        if !self.rope_base.is_finite() || self.rope_base <= 1.0 {
            return Err(Error::Config("rope_base must be finite and > 1".into()));
        }
        Ok(())
    }
}

/// Per-layer parameter tensors. Matrices are row-major `[out][in]`.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

/// The full deterministic parameter set, plus a content fingerprint.
#[derive(Debug, Clone)]
pub struct Weights {
    config: ModelConfig,
    pub token_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    fingerprint: String,
}

impl Weights {
    /// Deterministic normal(0, 0.02) initialization from the config seed.
    /// Norm gains start at 1.
    pub fn init(config: &ModelConfig) -> Result<Weights> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::<f32>::new(0.0, 0.02).expect("valid stddev");
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(&mut rng)).collect() };

        let token_embedding = draw(config.vocab * d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: vec![1.0; d],
                wq: draw(d * d),
                wk: draw(d * d),
                wv: draw(d * d),
                wo: draw(d * d),
                mlp_norm: vec![1.0; d],
                w_up: draw(4 * d * d),
                w_down: draw(d * 4 * d),
            });
        }
        let final_norm = vec![1.0; d];
        Ok(Weights::assemble(config.clone(), token_embedding, layers, final_norm))
    }

    fn assemble(
        config: ModelConfig,
        token_embedding: Vec<f32>,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f32>,
    ) -> Weights {
        let mut w = Weights {
            config,
            token_embedding,
            layers,
            final_norm,
            fingerprint: String::new(),
        };
        w.fingerprint = w.compute_fingerprint();
        w
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Hex digest identifying these exact parameter values; cache stores use
    /// it to refuse KVs built under different weights.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn compute_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let c = &self.config;
        for v in [c.n_layers, c.n_heads, c.d_model, c.vocab, c.max_pos] {
            hasher.update((v as u64).to_le_bytes());
        }
        hasher.update(c.rope_base.to_le_bytes());
        hasher.update(c.seed.to_le_bytes());
        for t in self.tensors() {
            hasher.update(t.name.as_bytes());
            for &v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        hex::encode(&digest[..16])
    }

    /// Canonical tensor list, in container order.
    fn tensors(&self) -> Vec<Tensor> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(2 + 8 * self.layers.len());
        out.push(Tensor::new(
            "token_embedding",
            vec![self.config.vocab, d],
            self.token_embedding.clone(),
        ));
        for (i, l) in self.layers.iter().enumerate() {
            out.push(Tensor::new(format!("layer.{i}.attn_norm"), vec![d], l.attn_norm.clone()));
            out.push(Tensor::new(format!("layer.{i}.wq"), vec![d, d], l.wq.clone()));
            out.push(Tensor::new(format!("layer.{i}.wk"), vec![d, d], l.wk.clone()));
            out.push(Tensor::new(format!("layer.{i}.wv"), vec![d, d], l.wv.clone()));
            out.push(Tensor::new(format!("layer.{i}.wo"), vec![d, d], l.wo.clone()));
            out.push(Tensor::new(format!("layer.{i}.mlp_norm"), vec![d], l.mlp_norm.clone()));
            out.push(Tensor::new(format!("layer.{i}.w_up"), vec![4 * d, d], l.w_up.clone()));
            out.push(Tensor::new(format!("layer.{i}.w_down"), vec![d, 4 * d], l.w_down.clone()));
        }
        out.push(Tensor::new("final_norm", vec![d], self.final_norm.clone()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, &self.config, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Weights> {
        let parsed = container::read(path)?;
        let config = parsed.config.clone();
        config.validate()?;
        let d = config.d_model;

        let take = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
            let t = parsed.tensor(name)?;
            if t.dims != dims {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: format!("{dims:?}"),
                    actual: format!("{:?}", t.dims),
                });
            }
            Ok(t.data.clone())
        };

        let token_embedding = take("token_embedding", &[config.vocab, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: take(&format!("layer.{i}.attn_norm"), &[d])?,
                wq: take(&format!("layer.{i}.wq"), &[d, d])?,
                wk: take(&format!("layer.{i}.wk"), &[d, d])?,
                wv: take(&format!("layer.{i}.wv"), &[d, d])?,
                wo: take(&format!("layer.{i}.wo"), &[d, d])?,
                mlp_norm: take(&format!("layer.{i}.mlp_norm"), &[d])?,
                w_up: take(&format!("layer.{i}.w_up"), &[4 * d, d])?,
                w_down: take(&format!("layer.{i}.w_down"), &[d, 4 * d])?,
            });
        }
        let final_norm = take("final_norm", &[d])?;
        Ok(Weights::assemble(config, token_embedding, layers, final_norm))
    }
}

/// Keys and values of one token block, per layer, with the rotary rotation
/// already baked into the keys. Layout per layer: `[tokens][n_heads][d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV {
    n_heads: usize,
    d_head: usize,
    positions: Vec<u32>,
    layers: Vec<KvTensors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvTensors {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl LayerKV {
    pub fn new(n_heads: usize, d_head: usize, positions: Vec<u32>, layers: Vec<KvTensors>) -> Self {
        LayerKV {
            n_heads,
            d_head,
            positions,
            layers,
        }
    }

    pub fn token_count(&self) -> usize {
        self.positions.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn layer(&self, i: usize) -> &KvTensors {
        &self.layers[i]
    }

    pub fn max_position(&self) -> Option<u32> {
        self.positions.iter().copied().max()
    }

    /// Concatenate blocks into one past bag. All parts must agree on layer
    /// count and head geometry; token order follows the argument order.
    pub fn concat(parts: &[&LayerKV]) -> Result<LayerKV> {
        let first = parts.first().ok_or(Error::EmptyInput("LayerKV::concat"))?;
        let mut positions = Vec::new();
        let mut layers: Vec<KvTensors> = (0..first.n_layers())
            .map(|_| KvTensors {
                keys: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        for p in parts {
            if p.n_layers() != first.n_layers() {
                return Err(Error::LayerCountMismatch {
                    expected: first.n_layers(),
                    actual: p.n_layers(),
                });
            }
            if p.n_heads != first.n_heads || p.d_head != first.d_head {
                return Err(Error::CacheMismatch(
                    "KV head geometry differs between blocks".into(),
                ));
            }
            positions.extend_from_slice(&p.positions);
            for (dst, src) in layers.iter_mut().zip(&p.layers) {
                dst.keys.extend_from_slice(&src.keys);
                dst.values.extend_from_slice(&src.values);
            }
        }
        Ok(LayerKV {
            n_heads: first.n_heads,
            d_head: first.d_head,
            positions,
            layers,
        })
    }
}

/// Final-layer hidden states, row-major `[tokens][d_model]`.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    data: Vec<f32>,
    dim: usize,
}

impl HiddenStates {
    pub fn new(data: Vec<f32>, dim: usize) -> Self {
        debug_assert_eq!(data.len() % dim, 0);
        HiddenStates { data, dim }
    }

    pub fn token_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_row(&self) -> &[f32] {
        self.row(self.token_count() - 1)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Provenance tag carried by every embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedKind {
    #[serde(rename = "individual")]
    Individual,
    #[serde(rename = "seq")]
    Seq,
    #[serde(rename = "par")]
    Par,
    #[serde(rename = "par-distill")]
    ParDistill,
    #[serde(rename = "mean-pool")]
    MeanPool,
    #[serde(rename = "weighted-pool")]
    WeightedPool,
}

impl EmbedKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmbedKind::Individual => "individual",
            EmbedKind::Seq => "seq",
            EmbedKind::Par => "par",
            EmbedKind::ParDistill => "par-distill",
            EmbedKind::MeanPool => "mean-pool",
            EmbedKind::WeightedPool => "weighted-pool",
        }
    }
}

impl fmt::Display for EmbedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(EmbedKind::Individual),
            "seq" => Ok(EmbedKind::Seq),
            "par" => Ok(EmbedKind::Par),
            "par-distill" => Ok(EmbedKind::ParDistill),
            "mean-pool" => Ok(EmbedKind::MeanPool),
            "weighted-pool" => Ok(EmbedKind::WeightedPool),
            other => Err(Error::Config(format!("unknown embedding kind `{other}`"))),
        }
    }
}

/// A unit-length vector with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub kind: EmbedKind,
    pub alpha: Option<f64>,
}

impl Embedding {
    /// Normalize `vector` to unit length. Zero or non-finite norms error out.
    /// A vector already unit within 1e-7 passes through bit-unchanged, so
    /// renormalizing a normalized vector is the identity.
    pub fn unit(vector: Vec<f32>, kind: EmbedKind) -> Result<Embedding> {
        let norm = l2_norm(&vector);
        if !norm.is_finite() || norm < 1e-30 {
            return Err(Error::DegenerateNorm);
        }
        let vector = if (norm - 1.0).abs() <= 1e-7 {
            vector
        } else {
            vector.iter().map(|&v| (v as f64 / norm) as f32).collect()
        };
        Ok(Embedding {
            vector,
            kind,
            alpha: None,
        })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Embedding {
        self.alpha = Some(alpha);
        self
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity, accumulated in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Cosine distance 1 - cos, clamped at 0 against rounding.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    (1.0 - cosine(a, b)).max(0.0)
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn rms_norm_into(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let mean_sq = x.iter().map(|&v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// out[r] = W[r,:] . x for row-major W of shape [rows][cols].
fn matvec_into(w: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Rotate one head vector in place (half-split pairs) at position `pos`.
fn rope_rotate(head: &mut [f32], pos: u32, base: f32) {
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

fn apply_rope(block: &mut [f32], positions: &[u32], n_heads: usize, d_head: usize, base: f32) {
    let d = n_heads * d_head;
    for (i, &pos) in positions.iter().enumerate() {
        for h in 0..n_heads {
            let start = i * d + h * d_head;
            rope_rotate(&mut block[start..start + d_head], pos, base);
        }
    }
}

fn softmax_in_place(scores: &mut [f32]) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Run the transformer over `tokens` placed at `positions`, optionally
/// attending to a bag of past KVs.
///
/// Causal attention applies within the new tokens; every new token also
/// attends to all past tokens, whatever their position ids. Returns the
/// final-layer hidden states (after the final norm) and the new tokens'
/// per-layer KVs with rotary rotation baked into the keys.
pub fn forward(
    weights: &Weights,
    tokens: &[u16],
    positions: &[u32],
    past: Option<&LayerKV>,
) -> Result<(HiddenStates, LayerKV)> {
    let cfg = weights.config();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.d_head();
    let t_new = tokens.len();

    if positions.len() != t_new {
        return Err(Error::Config(format!(
            "got {} position ids for {} tokens",
            positions.len(),
            t_new
        )));
    }
    if t_new == 0 {
        return Err(Error::EmptyInput("forward over zero tokens"));
    }
    for &p in positions {
        if p as usize >= cfg.max_pos {
            return Err(Error::PositionOverflow {
                pos: p as usize,
                max_pos: cfg.max_pos,
            });
        }
    }
    if let Some(p) = past {
        if p.n_layers() != cfg.n_layers {
            return Err(Error::LayerCountMismatch {
                expected: cfg.n_layers,
                actual: p.n_layers(),
            });
        }
        if p.n_heads() != nh || p.d_head() != dh {
            return Err(Error::CacheMismatch(
                "past KV head geometry does not match the model".into(),
            ));
        }
    }
    let t_past = past.map_or(0, |p| p.token_count());

    // token embeddings
    let mut x = Vec::with_capacity(t_new * d);
    for &tok in tokens {
        let tok = tok as usize;
        if tok >= cfg.vocab {
            return Err(Error::Data(format!("token id {tok} out of vocab {}", cfg.vocab)));
        }
        x.extend_from_slice(&weights.token_embedding[tok * d..(tok + 1) * d]);
    }

    let scale = 1.0 / (dh as f32).sqrt();
    let mut out_layers = Vec::with_capacity(cfg.n_layers);
    let mut normed = vec![0.0f32; t_new * d];
    let mut q = vec![0.0f32; t_new * d];
    let mut k = vec![0.0f32; t_new * d];
    let mut v = vec![0.0f32; t_new * d];
    let mut attn = vec![0.0f32; t_new * d];
    let mut proj = vec![0.0f32; d];
    let mut up = vec![0.0f32; 4 * d];
    let mut scores: Vec<f32> = Vec::new();

    for (l, lw) in weights.layers.iter().enumerate() {
        for i in 0..t_new {
            rms_norm_into(&x[i * d..(i + 1) * d], &lw.attn_norm, &mut normed[i * d..(i + 1) * d]);
        }
        for i in 0..t_new {
            let xi = &normed[i * d..(i + 1) * d];
            matvec_into(&lw.wq, xi, &mut q[i * d..(i + 1) * d]);
            matvec_into(&lw.wk, xi, &mut k[i * d..(i + 1) * d]);
            matvec_into(&lw.wv, xi, &mut v[i * d..(i + 1) * d]);
        }
        apply_rope(&mut q, positions, nh, dh, cfg.rope_base);
        apply_rope(&mut k, positions, nh, dh, cfg.rope_base);

        let past_layer = past.map(|p| p.layer(l));
        attn.iter_mut().for_each(|a| *a = 0.0);
        for h in 0..nh {
            let col = h * dh;
            for i in 0..t_new {
                let qi = &q[i * d + col..i * d + col + dh];
                scores.clear();
                if let Some(pl) = past_layer {
                    for j in 0..t_past {
                        scores.push(dot(qi, &pl.keys[j * d + col..j * d + col + dh]) * scale);
                    }
                }
                for j in 0..=i {
                    scores.push(dot(qi, &k[j * d + col..j * d + col + dh]) * scale);
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[i * d + col..i * d + col + dh];
                if let Some(pl) = past_layer {
                    for j in 0..t_past {
                        let w = scores[j];
                        for (o, &val) in out.iter_mut().zip(&pl.values[j * d + col..j * d + col + dh]) {
                            *o += w * val;
                        }
                    }
                }
                for j in 0..=i {
                    let w = scores[t_past + j];
                    for (o, &val) in out.iter_mut().zip(&v[j * d + col..j * d + col + dh]) {
                        *o += w * val;
                    }
                }
            }
        }

        for i in 0..t_new {
            matvec_into(&lw.wo, &attn[i * d..(i + 1) * d], &mut proj);
            for (xv, &p) in x[i * d..(i + 1) * d].iter_mut().zip(&proj) {
                *xv += p;
            }
        }

        for i in 0..t_new {
            rms_norm_into(&x[i * d..(i + 1) * d], &lw.mlp_norm, &mut normed[i * d..(i + 1) * d]);
            matvec_into(&lw.w_up, &normed[i * d..(i + 1) * d], &mut up);
            for u in up.iter_mut() {
                *u = gelu(*u);
            }
            matvec_into(&lw.w_down, &up, &mut proj);
            for (xv, &p) in x[i * d..(i + 1) * d].iter_mut().zip(&proj) {
                *xv += p;
            }
        }

        out_layers.push(KvTensors {
            keys: k.clone(),
            values: v.clone(),
        });
    }

    for i in 0..t_new {
        let row: Vec<f32> = x[i * d..(i + 1) * d].to_vec();
        rms_norm_into(&row, &weights.final_norm, &mut x[i * d..(i + 1) * d]);
    }

    let kv = LayerKV::new(nh, dh, positions.to_vec(), out_layers);
    Ok((HiddenStates::new(x, d), kv))
}

/// Last-token pooling: the final row, L2-normalized.
pub fn pool_last(hidden: &HiddenStates, kind: EmbedKind) -> Result<Embedding> {
    if hidden.token_count() == 0 {
        return Err(Error::EmptyInput("pool_last over zero tokens"));
    }
    Embedding::unit(hidden.last_row().to_vec(), kind)
}
