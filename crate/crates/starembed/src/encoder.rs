//! The four encoding strategies and the reusable context-KV store.
//!
//! * `individual` — encode the target alone.
//! * `seq` — concatenate related segments and the target into one sequence
//!   with sequential positions.
//! * `par` — encode each related segment independently into a KV cache; all
//!   caches share the positional span `[0, L)`, the target runs at `[L, 2L)`
//!   attending to every cache but with no attention between caches. Total
//!   positional usage stays `2L` no matter how many neighbors there are.
//! * `par-distill` — like `par`, but an instruction stage first attends over
//!   the caches and its KV states are inserted into the target's attention as
//!   a latent summary of the context.
//!
//! Caches are immutable once built, keyed by segment id, and tied to one
//! weights fingerprint and one `L` so stale or foreign KVs are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward, pool_last, EmbedKind, Embedding, HiddenStates, LayerKV, Weights};
use crate::tokenizer::{tokenize, truncate_tail};

/// Which encoding strategy to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "individual")]
    Individual,
    #[serde(rename = "seq")]
    Seq,
    #[serde(rename = "par")]
    Par,
    #[serde(rename = "par-distill")]
    ParDistill,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Individual => "individual",
            Strategy::Seq => "seq",
            Strategy::Par => "par",
            Strategy::ParDistill => "par-distill",
        }
    }

    pub fn embed_kind(&self) -> EmbedKind {
        match self {
            Strategy::Individual => EmbedKind::Individual,
            Strategy::Seq => EmbedKind::Seq,
            Strategy::Par => EmbedKind::Par,
            Strategy::ParDistill => EmbedKind::ParDistill,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(Strategy::Individual),
            "seq" => Ok(Strategy::Seq),
            "par" => Ok(Strategy::Par),
            "par-distill" => Ok(Strategy::ParDistill),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// What to drop when a sequential concatenation overflows `max_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TruncationPolicy {
    /// Remove the earliest related tokens, always keeping the full target.
    #[serde(rename = "drop-head")]
    DropHead,
    /// Keep the first `max_pos` tokens even if that cuts into the target.
    #[serde(rename = "faithful-tail")]
    FaithfulTail,
}

impl TruncationPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            TruncationPolicy::DropHead => "drop-head",
            TruncationPolicy::FaithfulTail => "faithful-tail",
        }
    }
}

impl fmt::Display for TruncationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TruncationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop-head" => Ok(TruncationPolicy::DropHead),
            "faithful-tail" => Ok(TruncationPolicy::FaithfulTail),
            other => Err(Error::Config(format!("unknown truncation policy `{other}`"))),
        }
    }
}

/// Default separator between concatenated segments: a single newline byte.
pub const DEFAULT_SEPARATOR: u8 = b'\n';

/// Options for [`encode_seq`].
#[derive(Debug, Clone)]
pub struct SeqOptions {
    pub max_pos: usize,
    pub truncation: TruncationPolicy,
    /// `None` disables the separator (used by the equivalence oracles).
    pub separator: Option<u8>,
}

impl SeqOptions {
    pub fn new(max_pos: usize) -> Self {
        SeqOptions {
            max_pos,
            truncation: TruncationPolicy::DropHead,
            separator: Some(DEFAULT_SEPARATOR),
        }
    }

    pub fn without_separator(mut self) -> Self {
        self.separator = None;
        self
    }

    pub fn truncation(mut self, policy: TruncationPolicy) -> Self {
        self.truncation = policy;
        self
    }
}

/// Encode a segment on its own: tokens at positions `0..t`, last-token pooled.
pub fn encode_individual(weights: &Weights, text: &str) -> Result<Embedding> {
    let tokens = tokenize(text);
    let positions: Vec<u32> = (0..tokens.len() as u32).collect();
    let (hidden, _) = forward(weights, &tokens, &positions, None)?;
    pool_last(&hidden, EmbedKind::Individual)
}

/// Sequential concatenation: `related[0] ⧺ sep ⧺ … ⧺ related[n-1] ⧺ sep ⧺ target`
/// encoded in one pass with sequential positions. Order is the caller's.
pub fn encode_seq(
    weights: &Weights,
    related: &[&str],
    target: &str,
    opts: &SeqOptions,
) -> Result<Embedding> {
    let mut stream: Vec<u16> = Vec::new();
    for text in related {
        stream.extend(tokenize(text));
        if let Some(sep) = opts.separator {
            stream.push(u16::from(sep));
        }
    }
    let target_tokens = tokenize(target);
    let target_len = target_tokens.len();
    stream.extend(target_tokens);

    if stream.len() > opts.max_pos {
        match opts.truncation {
            TruncationPolicy::DropHead => {
                if target_len > opts.max_pos {
                    return Err(Error::TargetTooLong {
                        tokens: target_len,
                        budget: opts.max_pos,
                    });
                }
                stream.drain(..stream.len() - opts.max_pos);
            }
            TruncationPolicy::FaithfulTail => stream.truncate(opts.max_pos),
        }
    }

    let positions: Vec<u32> = (0..stream.len() as u32).collect();
    let (hidden, _) = forward(weights, &stream, &positions, None)?;
    pool_last(&hidden, EmbedKind::Seq)
}

/// The cached KVs of one independently encoded context segment.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheEntry {
    pub segment_id: String,
    pub kv: LayerKV,
    pub token_count: usize,
    /// The positional span the entry was built for (its token count never
    /// exceeds it).
    pub pe_span: usize,
}

fn check_l_ctx(weights: &Weights, l_ctx: usize) -> Result<()> {
    let max_pos = weights.config().max_pos;
    if l_ctx == 0 || l_ctx > max_pos / 2 {
        return Err(Error::Config(format!(
            "l_ctx {l_ctx} must be in 1..={} (max_pos / 2)",
            max_pos / 2
        )));
    }
    Ok(())
}

/// Encode one context segment standalone and keep only its per-layer KVs.
/// Tokens are tail-truncated to `l_ctx` with EOS preserved as the last kept
/// token; positions are `0..t`.
pub fn build_context_cache(
    weights: &Weights,
    segment_id: &str,
    text: &str,
    l_ctx: usize,
) -> Result<KVCacheEntry> {
    check_l_ctx(weights, l_ctx)?;
    let tokens = truncate_tail(&tokenize(text), l_ctx);
    let positions: Vec<u32> = (0..tokens.len() as u32).collect();
    let (_, kv) = forward(weights, &tokens, &positions, None)?;
    Ok(KVCacheEntry {
        segment_id: segment_id.to_string(),
        kv,
        token_count: tokens.len(),
        pe_span: l_ctx,
    })
}

/// Write-once store of context caches sharing one weights fingerprint and one
/// positional span. Reads never mutate; concurrent encoding against a store is
/// safe.
#[derive(Debug, Clone)]
pub struct CacheStore {
    entries: BTreeMap<String, KVCacheEntry>,
    fingerprint: String,
    l_ctx: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    fingerprint: String,
    l_ctx: usize,
    entries: Vec<CacheManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct CacheManifestEntry {
    id: String,
    file: String,
    tokens: usize,
}

impl CacheStore {
    pub fn new(weights: &Weights, l_ctx: usize) -> Result<CacheStore> {
        check_l_ctx(weights, l_ctx)?;
        Ok(CacheStore {
            entries: BTreeMap::new(),
            fingerprint: weights.fingerprint().to_string(),
            l_ctx,
        })
    }

    /// Build caches for `segments`, fanning out across `workers` threads.
    /// The result is independent of build order and worker count.
    pub fn build(
        weights: &Weights,
        segments: &[(&str, &str)],
        l_ctx: usize,
        workers: usize,
    ) -> Result<CacheStore> {
        let mut store = CacheStore::new(weights, l_ctx)?;
        let built: Vec<KVCacheEntry> = if workers <= 1 {
            segments
                .iter()
                .map(|(id, text)| build_context_cache(weights, id, text, l_ctx))
                .collect::<Result<_>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                segments
                    .par_iter()
                    .map(|(id, text)| build_context_cache(weights, id, text, l_ctx))
                    .collect::<Result<_>>()
            })?
        };
        for entry in built {
            store.insert(entry)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, entry: KVCacheEntry) -> Result<()> {
        if entry.pe_span != self.l_ctx {
            return Err(Error::CacheMismatch(format!(
                "entry `{}` was built for pe_span {}, store uses {}",
                entry.segment_id, entry.pe_span, self.l_ctx
            )));
        }
        if self.entries.contains_key(&entry.segment_id) {
            return Err(Error::DuplicateId {
                id: entry.segment_id,
            });
        }
        self.entries.insert(entry.segment_id.clone(), entry);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&KVCacheEntry> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::UnknownId { id: id.to_string() })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn l_ctx(&self) -> usize {
        self.l_ctx
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn check_weights(&self, weights: &Weights) -> Result<()> {
        if weights.fingerprint() != self.fingerprint {
            return Err(Error::CacheMismatch(format!(
                "store built under weights {}, encoding with {}",
                self.fingerprint,
                weights.fingerprint()
            )));
        }
        Ok(())
    }

    fn select(&self, ids: &[String]) -> Result<Vec<&KVCacheEntry>> {
        // ascending-id order keeps the past bag bit-reproducible
        let mut unique: BTreeMap<&str, &KVCacheEntry> = BTreeMap::new();
        for id in ids {
            unique.insert(id.as_str(), self.get(id)?);
        }
        Ok(unique.into_values().collect())
    }

    /// Persist to a directory: one tensor container per entry plus a manifest.
    /// Round trips are bit-exact.
    pub fn save_dir(&self, weights: &Weights, dir: &Path) -> Result<()> {
        self.check_weights(weights)?;
        fs::create_dir_all(dir)?;
        let mut manifest = CacheManifest {
            fingerprint: self.fingerprint.clone(),
            l_ctx: self.l_ctx,
            entries: Vec::new(),
        };
        for (i, (id, entry)) in self.entries.iter().enumerate() {
            let file = format!("{i:06}.semb");
            let nh = entry.kv.n_heads();
            let dh = entry.kv.d_head();
            let t = entry.token_count;
            let mut tensors = Vec::with_capacity(1 + 2 * entry.kv.n_layers());
            tensors.push(crate::container::Tensor::new(
                "positions",
                vec![t],
                entry.kv.positions().iter().map(|&p| p as f32).collect(),
            ));
            for l in 0..entry.kv.n_layers() {
                let kv = entry.kv.layer(l);
                tensors.push(crate::container::Tensor::new(
                    format!("layer.{l}.keys"),
                    vec![t, nh, dh],
                    kv.keys.clone(),
                ));
                tensors.push(crate::container::Tensor::new(
                    format!("layer.{l}.values"),
                    vec![t, nh, dh],
                    kv.values.clone(),
                ));
            }
            crate::container::write(&dir.join(&file), weights.config(), &tensors)?;
            manifest.entries.push(CacheManifestEntry {
                id: id.clone(),
                file,
                tokens: t,
            });
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("manifest: {e}")))?;
        fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<CacheStore> {
        let manifest_path = dir.join("manifest.json");
        let json = fs::read_to_string(&manifest_path)?;
        let manifest: CacheManifest = serde_json::from_str(&json)
            .map_err(|e| Error::Data(format!("manifest: {e}")))?;

        let mut entries = BTreeMap::new();
        for m in manifest.entries {
            let parsed = crate::container::read(&dir.join(&m.file))?;
            let cfg = &parsed.config;
            let positions: Vec<u32> = parsed
                .tensor("positions")?
                .data
                .iter()
                .map(|&p| p as u32)
                .collect();
            let mut layers = Vec::with_capacity(cfg.n_layers);
            for l in 0..cfg.n_layers {
                layers.push(crate::model::KvTensors {
                    keys: parsed.tensor(&format!("layer.{l}.keys"))?.data.clone(),
                    values: parsed.tensor(&format!("layer.{l}.values"))?.data.clone(),
                });
            }
            let kv = LayerKV::new(cfg.n_heads, cfg.d_head(), positions, layers);
            entries.insert(
                m.id.clone(),
                KVCacheEntry {
                    segment_id: m.id,
                    kv,
                    token_count: m.tokens,
                    pe_span: manifest.l_ctx,
                },
            );
        }
        Ok(CacheStore {
            entries,
            fingerprint: manifest.fingerprint,
            l_ctx: manifest.l_ctx,
        })
    }
}

/// Run the target block against a bag of context caches and return its hidden
/// states and KV. Target tokens must already be truncated; positions start at
/// `l_ctx`. Entries are bagged in ascending segment-id order so the output is
/// bit-reproducible; attention itself is order-free up to float rounding.
pub fn par_forward(
    weights: &Weights,
    entries: &[&KVCacheEntry],
    l_ctx: usize,
    target_tokens: &[u16],
) -> Result<(HiddenStates, LayerKV)> {
    check_l_ctx(weights, l_ctx)?;
    for e in entries {
        if e.pe_span != l_ctx {
            return Err(Error::CacheMismatch(format!(
                "cache `{}` built for pe_span {}, encode uses {l_ctx}",
                e.segment_id, e.pe_span
            )));
        }
    }
    let mut sorted: Vec<&KVCacheEntry> = entries.to_vec();
    sorted.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));

    let positions: Vec<u32> = (0..target_tokens.len() as u32)
        .map(|i| i + l_ctx as u32)
        .collect();
    let bag;
    let past = if sorted.is_empty() {
        None
    } else {
        let kvs: Vec<&LayerKV> = sorted.iter().map(|e| &e.kv).collect();
        bag = LayerKV::concat(&kvs)?;
        Some(&bag)
    };
    forward(weights, target_tokens, &positions, past)
}

/// Parallel cached-KV encoding: the target attends to every cache in the
/// store named by `related`; caches never attend to each other.
pub fn encode_par(
    weights: &Weights,
    store: &CacheStore,
    related: &[String],
    target: &str,
) -> Result<Embedding> {
    store.check_weights(weights)?;
    let entries = store.select(related)?;
    let target_tokens = truncate_tail(&tokenize(target), store.l_ctx());
    let (hidden, _) = par_forward(weights, &entries, store.l_ctx(), &target_tokens)?;
    pool_last(&hidden, EmbedKind::Par)
}

/// Like [`encode_par`], with a distillation stage first: the instruction runs
/// at positions `[L, L + t_ins)` attending over the cache bag, and its KV
/// states join the bag for the target pass at `[L + t_ins, ...)`.
pub fn encode_par_distill(
    weights: &Weights,
    store: &CacheStore,
    related: &[String],
    instruction: &str,
    target: &str,
) -> Result<Embedding> {
    if instruction.is_empty() {
        return Err(Error::Config("par-distill requires a non-empty instruction".into()));
    }
    store.check_weights(weights)?;
    let l_ctx = store.l_ctx();
    let max_pos = weights.config().max_pos;

    let instruction_tokens = tokenize(instruction);
    let budget = max_pos.saturating_sub(2 * l_ctx);
    if instruction_tokens.len() > budget {
        return Err(Error::InstructionTooLong {
            tokens: instruction_tokens.len(),
            budget,
        });
    }

    let entries = store.select(related)?;
    let hidden = par_distill_hidden(weights, &entries, l_ctx, &instruction_tokens, target)?;
    pool_last(&hidden, EmbedKind::ParDistill)
}

/// The two-stage distill computation, exposed for the equivalence oracles.
pub fn par_distill_hidden(
    weights: &Weights,
    entries: &[&KVCacheEntry],
    l_ctx: usize,
    instruction_tokens: &[u16],
    target: &str,
) -> Result<HiddenStates> {
    // stage 1: instruction attends to the cache bag, causal among itself
    let (_, distilled) = par_forward(weights, entries, l_ctx, instruction_tokens)?;

    // stage 2: target attends to the bag plus the distilled KVs
    let mut sorted: Vec<&KVCacheEntry> = entries.to_vec();
    sorted.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
    let mut kvs: Vec<&LayerKV> = sorted.iter().map(|e| &e.kv).collect();
    kvs.push(&distilled);
    let past = LayerKV::concat(&kvs)?;

    let target_tokens = truncate_tail(&tokenize(target), l_ctx);
    let start = (l_ctx + instruction_tokens.len()) as u32;
    let positions: Vec<u32> = (0..target_tokens.len() as u32).map(|i| i + start).collect();
    let (hidden, _) = forward(weights, &target_tokens, &positions, Some(&past))?;
    Ok(hidden)
}

/// A fully specified encoding request for one target.
#[derive(Debug, Clone)]
pub struct EncodePlan {
    pub strategy: Strategy,
    pub target: String,
    /// Ordered for `seq`; treated as a set by `par` variants.
    pub related: Vec<String>,
    pub l_ctx: usize,
    pub max_pos: usize,
    pub truncation: TruncationPolicy,
    pub separator: Option<u8>,
    pub instruction: Option<String>,
}

impl EncodePlan {
    pub fn new(strategy: Strategy, target: impl Into<String>, related: Vec<String>) -> Self {
        EncodePlan {
            strategy,
            target: target.into(),
            related,
            l_ctx: 64,
            max_pos: 8192,
            truncation: TruncationPolicy::DropHead,
            separator: Some(DEFAULT_SEPARATOR),
            instruction: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::ParDistill => {
                if self.instruction.as_deref().unwrap_or("").is_empty() {
                    return Err(Error::Config(
                        "strategy par-distill requires an instruction".into(),
                    ));
                }
            }
            _ => {
                if self.instruction.is_some() {
                    return Err(Error::Config(format!(
                        "instruction is only valid for par-distill, not {}",
                        self.strategy
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Execute a plan against a corpus. `store` may hold prebuilt caches; missing
/// ones are built on the fly. With an empty related set every strategy
/// degrades to the individual encoding (par variants keep their positional
/// offset, which is equivalent under rotary shift invariance).
pub fn encode_with_plan(
    weights: &Weights,
    corpus: &Corpus,
    store: Option<&CacheStore>,
    plan: &EncodePlan,
) -> Result<Embedding> {
    plan.validate()?;
    let target = &corpus.get(&plan.target)?.text;

    match plan.strategy {
        Strategy::Individual => encode_individual(weights, target),
        Strategy::Seq => {
            let texts: Vec<&str> = plan
                .related
                .iter()
                .map(|id| corpus.get(id).map(|s| s.text.as_str()))
                .collect::<Result<_>>()?;
            let opts = SeqOptions {
                max_pos: plan.max_pos,
                truncation: plan.truncation,
                separator: plan.separator,
            };
            encode_seq(weights, &texts, target, &opts)
        }
        Strategy::Par | Strategy::ParDistill => {
            let owned;
            let store = match store {
                Some(s) => s,
                None => {
                    let segments: Vec<(&str, &str)> = plan
                        .related
                        .iter()
                        .map(|id| corpus.get(id).map(|s| (s.id.as_str(), s.text.as_str())))
                        .collect::<Result<_>>()?;
                    owned = CacheStore::build(weights, &segments, plan.l_ctx, 1)?;
                    &owned
                }
            };
            // distillation over an empty neighborhood reduces to par, so the
            // strategy honors the empty-context degradation
            if plan.strategy == Strategy::Par || plan.related.is_empty() {
                let mut e = encode_par(weights, store, &plan.related, target)?;
                e.kind = plan.strategy.embed_kind();
                Ok(e)
            } else {
                let instruction = plan.instruction.as_deref().expect("validated");
                encode_par_distill(weights, store, &plan.related, instruction, target)
            }
        }
    }
}
