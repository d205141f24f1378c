//! Command implementations: ingest, cache building, embedding, evaluation,
//! alpha search, and the three benchmark studies.
//!
//! Every command is reproducible: identical config and inputs produce
//! byte-identical outputs (wall-clock timings excepted). Output files begin
//! with the resolved semantic config for provenance.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, BalanceSpec};
use crate::corpus::{self, LoadedCorpus, SelectionKind, Selector};
use crate::encoder::{
    encode_individual, encode_par, encode_par_distill, encode_seq, CacheStore, EncodePlan,
    SeqOptions, Strategy,
};
use crate::error::{Error, Result};
use crate::eval::{run_task, EvalTask, TaskKind};
use crate::instructions;
use crate::model::{EmbedKind, Weights};

use super::config::{Method, RunConfig};

const PAGERANK_TOL: f64 = 1e-9;
const PAGERANK_MAX_ITER: usize = 100;

// ---------------------------------------------------------------------------
// Embedding file format (line-delimited JSON)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ConfigLine {
    record: String,
    config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    record: String,
    id: String,
    strategy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    dim: usize,
    /// f32 little-endian bytes, hex encoded
    hex: String,
}

fn vector_to_hex(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    hex::encode(bytes)
}

fn vector_from_hex(s: &str) -> Result<Vec<f32>> {
    let bytes = hex::decode(s).map_err(|e| Error::Data(format!("bad hex vector: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data("hex vector length not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Parsed embedding file: the echoed config plus id -> vector.
pub struct EmbeddingFile {
    pub config: serde_json::Value,
    pub vectors: BTreeMap<String, Vec<f32>>,
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingFile> {
    let text = std::fs::read_to_string(path)?;
    let mut config = serde_json::Value::Null;
    let mut vectors = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let probe: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        match probe.get("record").and_then(|r| r.as_str()) {
            Some("config") => {
                config = probe.get("config").cloned().unwrap_or(serde_json::Value::Null);
            }
            Some("embedding") => {
                let rec: EmbeddingLine =
                    serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                        line: lineno + 1,
                        msg: e.to_string(),
                    })?;
                let v = vector_from_hex(&rec.hex)?;
                if v.len() != rec.dim {
                    return Err(Error::Data(format!(
                        "embedding `{}` declares dim {} but has {}",
                        rec.id,
                        rec.dim,
                        v.len()
                    )));
                }
                vectors.insert(rec.id, v);
            }
            other => {
                return Err(Error::MalformedRecord {
                    line: lineno + 1,
                    msg: format!("unknown record type {other:?}"),
                })
            }
        }
    }
    Ok(EmbeddingFile { config, vectors })
}

// ---------------------------------------------------------------------------
// Task file format (line-delimited JSON)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
enum TaskRecord {
    #[serde(rename = "task")]
    Task { kind: String },
    #[serde(rename = "query")]
    Query {
        id: String,
        #[serde(default)]
        text: Option<String>,
        #[serde(default, rename = "ref")]
        embed_ref: Option<String>,
    },
    #[serde(rename = "candidate")]
    Candidate {
        id: String,
        #[serde(default)]
        text: Option<String>,
        #[serde(default, rename = "ref")]
        embed_ref: Option<String>,
    },
    #[serde(rename = "qrel")]
    Qrel { query: String, relevant: String },
    #[serde(rename = "label")]
    Label { id: String, class: String },
    #[serde(rename = "pool")]
    Pool { query: String, candidates: Vec<String> },
}

/// A task file before embedding resolution.
pub struct ParsedTask {
    pub kind: TaskKind,
    queries: Vec<(String, Option<String>, Option<String>)>,
    candidates: Vec<(String, Option<String>, Option<String>)>,
    qrels: BTreeMap<String, BTreeSet<String>>,
    labels: BTreeMap<String, String>,
    pools: BTreeMap<String, Vec<String>>,
}

pub fn parse_task_file(path: &Path) -> Result<ParsedTask> {
    let text = std::fs::read_to_string(path)?;
    let mut kind: Option<TaskKind> = None;
    let mut queries = Vec::new();
    let mut candidates = Vec::new();
    let mut qrels: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut pools = BTreeMap::new();

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TaskRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        match record {
            TaskRecord::Task { kind: k } => kind = Some(k.parse()?),
            TaskRecord::Query { id, text, embed_ref } => queries.push((id, text, embed_ref)),
            TaskRecord::Candidate { id, text, embed_ref } => {
                candidates.push((id, text, embed_ref))
            }
            TaskRecord::Qrel { query, relevant } => {
                qrels.entry(query).or_default().insert(relevant);
            }
            TaskRecord::Label { id, class } => {
                labels.insert(id, class);
            }
            TaskRecord::Pool { query, candidates } => {
                pools.insert(query, candidates);
            }
        }
    }

    Ok(ParsedTask {
        kind: kind.ok_or_else(|| Error::Data("task file has no task record".into()))?,
        queries,
        candidates,
        qrels,
        labels,
        pools,
    })
}

/// Resolve a parsed task against an embedding map, encoding inline texts with
/// `weights`. `text_cache` memoizes text encodings across calls.
pub fn materialize_task(
    parsed: &ParsedTask,
    weights: &Weights,
    embeddings: &BTreeMap<String, Vec<f32>>,
    text_cache: &mut HashMap<String, Vec<f32>>,
) -> Result<EvalTask> {
    let mut resolve = |id: &str, text: &Option<String>, embed_ref: &Option<String>| -> Result<Vec<f32>> {
        if let Some(t) = text {
            if let Some(v) = text_cache.get(t) {
                return Ok(v.clone());
            }
            let v = encode_individual(weights, t)?.vector;
            text_cache.insert(t.clone(), v.clone());
            return Ok(v);
        }
        let key = embed_ref.as_deref().unwrap_or(id);
        embeddings
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding { id: key.to_string() })
    };

    let queries = parsed
        .queries
        .iter()
        .map(|(id, text, r)| Ok((id.clone(), resolve(id, text, r)?)))
        .collect::<Result<Vec<_>>>()?;
    let candidates = parsed
        .candidates
        .iter()
        .map(|(id, text, r)| Ok((id.clone(), resolve(id, text, r)?)))
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalTask {
        kind: parsed.kind,
        queries,
        candidates,
        qrels: parsed.qrels.clone(),
        labels: parsed.labels.clone(),
        pools: parsed.pools.clone(),
    })
}

// ---------------------------------------------------------------------------
// Neighbor selection shared by embed / build-cache / alpha-search
// ---------------------------------------------------------------------------

fn individual_embeddings(
    weights: &Weights,
    loaded: &LoadedCorpus,
    workers: usize,
) -> Result<HashMap<String, Vec<f32>>> {
    let segments = loaded.corpus.segments();
    let embs: Vec<Vec<f32>> = if workers <= 1 {
        segments
            .iter()
            .map(|s| encode_individual(weights, &s.text).map(|e| e.vector))
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
                .map(|s| encode_individual(weights, &s.text).map(|e| e.vector))
                .collect::<Result<_>>()
        })?
    };
    Ok(segments
        .iter()
        .zip(embs)
        .map(|(s, e)| (s.id.clone(), e))
        .collect())
}

/// Related ids for every segment under the configured selection, in the order
/// the encoder will consume them.
fn neighborhoods(
    cfg: &RunConfig,
    loaded: &LoadedCorpus,
    individual: Option<&HashMap<String, Vec<f32>>>,
) -> Result<BTreeMap<String, Vec<String>>> {
    let graph = &loaded.graph;
    let mut out = BTreeMap::new();
    let pagerank_scores = match cfg.selection {
        SelectionKind::Pagerank => {
            Some(corpus::pagerank(graph, cfg.damping, PAGERANK_TOL, PAGERANK_MAX_ITER))
        }
        _ => None,
    };
    for segment in loaded.corpus.segments() {
        let related = match cfg.selection {
            SelectionKind::AsGiven => {
                let mut n = corpus::neighbors(graph, &segment.id)?.related;
                if let Some(k) = cfg.neighbors_k {
                    n.truncate(k);
                }
                n
            }
            SelectionKind::Degree => {
                let k = cfg.neighbors_k.unwrap_or(5);
                corpus::select_top_k(graph, &Selector::Degree, &segment.id, k)?.related
            }
            SelectionKind::Pagerank => {
                let k = cfg.neighbors_k.unwrap_or(5);
                let scores = pagerank_scores.as_ref().expect("computed above");
                corpus::select_top_k(graph, &Selector::Pagerank(scores), &segment.id, k)?.related
            }
            SelectionKind::Semantic => {
                let k = cfg.neighbors_k.unwrap_or(5);
                let individual = individual.ok_or_else(|| {
                    Error::Config("semantic selection needs individual embeddings".into())
                })?;
                let target = individual
                    .get(&segment.id)
                    .ok_or_else(|| Error::MissingEmbedding { id: segment.id.clone() })?;
                let sel = Selector::Semantic {
                    target,
                    candidates: individual,
                };
                corpus::select_top_k(graph, &sel, &segment.id, k)?.related
            }
        };
        out.insert(segment.id.clone(), related);
    }
    Ok(out)
}

fn needs_individual(cfg: &RunConfig) -> bool {
    cfg.selection == SelectionKind::Semantic
        || cfg.method.is_aggregation()
        || cfg.alpha.is_some()
}

// ---------------------------------------------------------------------------
// cmd_ingest
// ---------------------------------------------------------------------------

/// Validate a corpus file and summarize it: segment/edge counts, warnings,
/// and the total-degree histogram.
pub fn cmd_ingest(corpus_path: &Path) -> Result<String> {
    let loaded = corpus::load_corpus(corpus_path)?;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for id in loaded.corpus.ids() {
        let d = loaded.graph.total_degree(id)?;
        *histogram.entry(d).or_insert(0) += 1;
    }
    let mut out = String::new();
    writeln!(out, "segments: {}", loaded.corpus.len()).unwrap();
    writeln!(out, "edges: {}", loaded.graph.edge_count()).unwrap();
    writeln!(out, "warnings: {}", loaded.warnings.len()).unwrap();
    for w in &loaded.warnings {
        writeln!(out, "  {w}").unwrap();
    }
    writeln!(out, "degree histogram:").unwrap();
    for (degree, count) in histogram {
        writeln!(out, "  {degree}: {count}").unwrap();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// cmd_build_cache
// ---------------------------------------------------------------------------

/// Build KV caches for every segment appearing as a neighbor under the
/// configured selection, and persist them with a manifest.
pub fn cmd_build_cache(cfg: &RunConfig) -> Result<String> {
    let loaded = corpus::load_corpus(cfg.corpus_path()?)?;
    let weights = cfg.load_weights()?;
    let individual = if cfg.selection == SelectionKind::Semantic {
        Some(individual_embeddings(&weights, &loaded, cfg.workers)?)
    } else {
        None
    };
    let hoods = neighborhoods(cfg, &loaded, individual.as_ref())?;

    let needed: BTreeSet<&str> = hoods
        .values()
        .flat_map(|related| related.iter().map(String::as_str))
        .collect();
    let segments: Vec<(&str, &str)> = needed
        .iter()
        .map(|id| loaded.corpus.get(id).map(|s| (s.id.as_str(), s.text.as_str())))
        .collect::<Result<_>>()?;

    let store = CacheStore::build(&weights, &segments, cfg.l_ctx, cfg.workers)?;
    let dir = cfg.cache_dir_path()?;
    store.save_dir(&weights, dir)?;
    Ok(format!(
        "cached {} segments (l_ctx={}) into {}\n",
        store.len(),
        store.l_ctx(),
        dir.display()
    ))
}

// ---------------------------------------------------------------------------
// cmd_embed
// ---------------------------------------------------------------------------

struct EmbedContext<'a> {
    cfg: &'a RunConfig,
    weights: &'a Weights,
    loaded: &'a LoadedCorpus,
    hoods: &'a BTreeMap<String, Vec<String>>,
    store: Option<&'a CacheStore>,
    individual: Option<&'a HashMap<String, Vec<f32>>>,
}

fn embed_one(ctx: &EmbedContext<'_>, id: &str) -> Result<(Vec<f32>, EmbedKind, Option<f64>)> {
    let cfg = ctx.cfg;
    let related = ctx.hoods.get(id).cloned().unwrap_or_default();
    let kind = cfg.method.embed_kind();

    let structural: Vec<f32> = match cfg.method {
        Method::Strategy(strategy) => {
            let mut plan = EncodePlan::new(strategy, id, related.clone());
            plan.l_ctx = cfg.l_ctx;
            plan.max_pos = cfg.model.max_pos;
            plan.truncation = cfg.truncation;
            if strategy == Strategy::ParDistill {
                let spec = cfg.instruction.as_deref().ok_or_else(|| {
                    Error::Config("par-distill requires an instruction (preset name or text)".into())
                })?;
                plan.instruction = Some(instructions::resolve(spec));
            }
            crate::encoder::encode_with_plan(ctx.weights, &ctx.loaded.corpus, ctx.store, &plan)?
                .vector
        }
        Method::MeanPool | Method::WeightedPool => {
            let individual = ctx.individual.expect("aggregation precomputes individuals");
            if related.is_empty() {
                // no neighbors: fall back to the target's own embedding
                individual
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::MissingEmbedding { id: id.to_string() })?
            } else {
                let neighbor_embs: Vec<(&str, &[f32])> = related
                    .iter()
                    .map(|rid| {
                        individual
                            .get(rid)
                            .map(|v| (rid.as_str(), v.as_slice()))
                            .ok_or_else(|| Error::MissingEmbedding { id: rid.clone() })
                    })
                    .collect::<Result<_>>()?;
                match cfg.method {
                    Method::MeanPool => aggregate::mean_pool(&neighbor_embs)?.vector,
                    Method::WeightedPool => {
                        let target = individual
                            .get(id)
                            .ok_or_else(|| Error::MissingEmbedding { id: id.to_string() })?;
                        aggregate::weighted_pool(target, &neighbor_embs)?.vector
                    }
                    _ => unreachable!(),
                }
            }
        }
    };

    // semantic balancing against the individual embedding
    if let Some(alpha) = cfg.alpha {
        if cfg.method != Method::Strategy(Strategy::Individual) {
            let individual = ctx.individual.expect("balancing precomputes individuals");
            let ind = individual
                .get(id)
                .ok_or_else(|| Error::MissingEmbedding { id: id.to_string() })?;
            let balanced = aggregate::balance(ind, &structural, &BalanceSpec::new(alpha)?)?;
            return Ok((balanced, kind, Some(alpha)));
        }
    }
    Ok((structural, kind, None))
}

fn build_store_for(
    cfg: &RunConfig,
    weights: &Weights,
    loaded: &LoadedCorpus,
    hoods: &BTreeMap<String, Vec<String>>,
) -> Result<Option<CacheStore>> {
    let par = matches!(
        cfg.method,
        Method::Strategy(Strategy::Par) | Method::Strategy(Strategy::ParDistill)
    );
    if !par {
        return Ok(None);
    }
    if let Some(dir) = cfg.cache_dir.as_deref() {
        if dir.join("manifest.json").exists() {
            let store = CacheStore::load_dir(dir)?;
            if store.fingerprint() != weights.fingerprint() {
                return Err(Error::CacheMismatch(format!(
                    "cache dir {} was built under different weights",
                    dir.display()
                )));
            }
            if store.l_ctx() != cfg.l_ctx {
                return Err(Error::CacheMismatch(format!(
                    "cache dir {} uses l_ctx {}, config says {}",
                    dir.display(),
                    store.l_ctx(),
                    cfg.l_ctx
                )));
            }
            return Ok(Some(store));
        }
    }
    let needed: BTreeSet<&str> = hoods
        .values()
        .flat_map(|r| r.iter().map(String::as_str))
        .collect();
    let segments: Vec<(&str, &str)> = needed
        .iter()
        .map(|id| loaded.corpus.get(id).map(|s| (s.id.as_str(), s.text.as_str())))
        .collect::<Result<_>>()?;
    Ok(Some(CacheStore::build(
        weights,
        &segments,
        cfg.l_ctx,
        cfg.workers,
    )?))
}

/// Embed every corpus segment under the configured method and write one
/// line-delimited record per target.
pub fn cmd_embed(cfg: &RunConfig) -> Result<String> {
    let loaded = corpus::load_corpus(cfg.corpus_path()?)?;
    let weights = cfg.load_weights()?;

    let individual = if needs_individual(cfg) {
        Some(individual_embeddings(&weights, &loaded, cfg.workers)?)
    } else {
        None
    };
    let hoods = neighborhoods(cfg, &loaded, individual.as_ref())?;
    let store = build_store_for(cfg, &weights, &loaded, &hoods)?;

    let ctx = EmbedContext {
        cfg,
        weights: &weights,
        loaded: &loaded,
        hoods: &hoods,
        store: store.as_ref(),
        individual: individual.as_ref(),
    };

    let ids: Vec<&str> = loaded.corpus.ids().collect();
    let results: Vec<(Vec<f32>, EmbedKind, Option<f64>)> = if cfg.workers <= 1 {
        ids.iter().map(|id| embed_one(&ctx, id)).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            ids.par_iter().map(|id| embed_one(&ctx, id)).collect::<Result<_>>()
        })?
    };

    let mut out = String::new();
    let config_line = ConfigLine {
        record: "config".into(),
        config: cfg.provenance(&weights),
    };
    out.push_str(&serde_json::to_string(&config_line).map_err(|e| Error::Data(e.to_string()))?);
    out.push('\n');
    for (id, (vector, kind, alpha)) in ids.iter().zip(&results) {
        let line = EmbeddingLine {
            record: "embedding".into(),
            id: id.to_string(),
            strategy: kind.as_str().to_string(),
            alpha: *alpha,
            dim: vector.len(),
            hex: vector_to_hex(vector),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    let path = cfg.output_path()?;
    std::fs::write(path, out)?;
    Ok(format!(
        "embedded {} segments ({}) into {}\n",
        ids.len(),
        cfg.method,
        path.display()
    ))
}

// ---------------------------------------------------------------------------
// cmd_eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ReportDoc {
    config: serde_json::Value,
    report: crate::eval::MetricReport,
}

/// Evaluate a task file against an embedding file; write the report JSON and
/// optionally a per-query CSV.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let weights = cfg.load_weights()?;
    let parsed = parse_task_file(cfg.task_path()?)?;
    let embeddings = read_embedding_file(cfg.embeddings_path()?)?;
    let mut text_cache = HashMap::new();
    let task = materialize_task(&parsed, &weights, &embeddings.vectors, &mut text_cache)?;
    let result = run_task(&task, &cfg.metrics, cfg.model.seed)?;

    let doc = ReportDoc {
        config: cfg.provenance(&weights),
        report: result.report.clone(),
    };
    let json =
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Data(e.to_string()))? + "\n";
    let path = cfg.output_path()?;
    std::fs::write(path, json)?;

    if let Some(csv_path) = cfg.per_query.as_deref() {
        let mut csv = String::from("query,metric,value\n");
        for row in &result.per_query {
            writeln!(csv, "{},{},{}", csv_field(&row.query), row.metric, row.value).unwrap();
        }
        std::fs::write(csv_path, csv)?;
    }

    let mut summary = String::new();
    for (name, value) in &result.report.metrics {
        writeln!(summary, "{name}: {value:.6}").unwrap();
    }
    writeln!(summary, "report written to {}", path.display()).unwrap();
    Ok(summary)
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// cmd_alpha_search
// ---------------------------------------------------------------------------

/// Grid-search the balancing coefficient: embeddings are computed once, then
/// re-balanced and re-evaluated at every grid point.
pub fn cmd_alpha_search(cfg: &RunConfig) -> Result<(f64, f64, String)> {
    if cfg.method == Method::Strategy(Strategy::Individual) {
        return Err(Error::Config(
            "alpha search needs a structural strategy, not individual".into(),
        ));
    }
    let loaded = corpus::load_corpus(cfg.corpus_path()?)?;
    let weights = cfg.load_weights()?;
    let parsed = parse_task_file(cfg.task_path()?)?;

    // individual embeddings are required both for balancing and (possibly)
    // for semantic selection
    let individual = individual_embeddings(&weights, &loaded, cfg.workers)?;
    let hoods = neighborhoods(cfg, &loaded, Some(&individual))?;
    let store = build_store_for(cfg, &weights, &loaded, &hoods)?;

    // structural embedding per target, alpha-independent
    let base_cfg = RunConfig {
        alpha: None,
        ..cfg.clone()
    };
    let ctx = EmbedContext {
        cfg: &base_cfg,
        weights: &weights,
        loaded: &loaded,
        hoods: &hoods,
        store: store.as_ref(),
        individual: Some(&individual),
    };
    let ids: Vec<&str> = loaded.corpus.ids().collect();
    let structural: Vec<Vec<f32>> = ids
        .iter()
        .map(|id| embed_one(&ctx, id).map(|(v, _, _)| v))
        .collect::<Result<_>>()?;

    let (alphas, _) = aggregate::alpha_grid(cfg.alpha_step)?;
    let mut text_cache = HashMap::new();
    let mut scores: Vec<f64> = Vec::with_capacity(alphas.len());
    for &alpha in &alphas {
        let spec = BalanceSpec::new(alpha)?;
        let mut balanced: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (id, structural) in ids.iter().zip(&structural) {
            let ind = individual
                .get(*id)
                .ok_or_else(|| Error::MissingEmbedding { id: id.to_string() })?;
            balanced.insert(id.to_string(), aggregate::balance(ind, structural, &spec)?);
        }
        let task = materialize_task(&parsed, &weights, &balanced, &mut text_cache)?;
        let result = run_task(&task, &[cfg.objective], cfg.model.seed)?;
        scores.push(result.report.metrics[&cfg.objective.to_string()]);
    }

    let (best_alpha, best_score) =
        aggregate::grid_search_alpha(|a| scores[(a / cfg.alpha_step).round() as usize], cfg.alpha_step)?;

    let mut csv = format!(
        "# config: {}\nalpha,{}\n",
        serde_json::to_string(&cfg.provenance(&weights)).map_err(|e| Error::Data(e.to_string()))?,
        cfg.objective
    );
    for (alpha, score) in alphas.iter().zip(&scores) {
        writeln!(csv, "{alpha:.2},{score}").unwrap();
    }
    let path = cfg.output_path()?;
    std::fs::write(path, csv)?;

    let summary = format!(
        "alpha* = {best_alpha} ({} = {best_score}) grid written to {}\n",
        cfg.objective,
        path.display()
    );
    Ok((best_alpha, best_score, summary))
}

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

fn synth_text(rng: &mut ChaCha8Rng, tokens: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz      ";
    let bytes = tokens.saturating_sub(1);
    (0..bytes)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

fn median_ms(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

/// Wall-time comparison of the strategies as the neighbor count and segment
/// length grow. Par and par-distill time only the target encode; their caches
/// are prebuilt outside the clock.
pub fn cmd_bench_time(
    cfg: &RunConfig,
    n_list: &[usize],
    l_list: &[usize],
    runs: usize,
) -> Result<String> {
    let max_n = n_list.iter().copied().max().unwrap_or(1);
    let max_l = l_list.iter().copied().max().unwrap_or(32);
    let mut model = cfg.model.clone();
    // seq needs room for every context plus the target
    model.max_pos = model.max_pos.max((max_n + 1) * (max_l + 1) + 1);
    let weights = Weights::init(&model)?;
    let instruction = "Summarize the above related segments for encoding: ";

    let mut csv = String::from("strategy,n_contexts,segment_tokens,median_ms\n");
    let mut summary = String::new();
    for &l in l_list {
        for &n in n_list {
            let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ ((n as u64) << 20) ^ l as u64);
            let contexts: Vec<(String, String)> = (0..n)
                .map(|i| (format!("c{i:03}"), synth_text(&mut rng, l)))
                .collect();
            let refs: Vec<(&str, &str)> = contexts
                .iter()
                .map(|(a, b)| (a.as_str(), b.as_str()))
                .collect();
            let target = synth_text(&mut rng, l);
            let related: Vec<String> = contexts.iter().map(|(id, _)| id.clone()).collect();
            let texts: Vec<&str> = contexts.iter().map(|(_, t)| t.as_str()).collect();

            let l_ctx = l.min(model.max_pos / 2);
            let store = CacheStore::build(&weights, &refs, l_ctx, cfg.workers)?;
            let seq_opts = SeqOptions::new(model.max_pos);

            let time_of = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
                f()?; // warmup
                let mut samples = Vec::with_capacity(runs);
                for _ in 0..runs {
                    let start = Instant::now();
                    f()?;
                    samples.push(start.elapsed().as_secs_f64() * 1e3);
                }
                Ok(median_ms(&mut samples))
            };

            let rows: Vec<(&str, f64)> = vec![
                (
                    "individual",
                    time_of(&mut || encode_individual(&weights, &target).map(drop))?,
                ),
                (
                    "seq",
                    time_of(&mut || encode_seq(&weights, &texts, &target, &seq_opts).map(drop))?,
                ),
                (
                    "par",
                    time_of(&mut || encode_par(&weights, &store, &related, &target).map(drop))?,
                ),
                (
                    "par-distill",
                    time_of(&mut || {
                        encode_par_distill(&weights, &store, &related, instruction, &target)
                            .map(drop)
                    })?,
                ),
            ];
            for (name, ms) in rows {
                writeln!(csv, "{name},{n},{l},{ms:.3}").unwrap();
            }
        }
    }
    let path = cfg.output_path()?;
    std::fs::write(path, &csv)?;
    writeln!(summary, "timings written to {}", path.display()).unwrap();
    Ok(summary)
}

/// Sensitivity to the order of related segments: encode under random
/// permutations and report pairwise cosine distances per strategy.
pub fn cmd_bench_order(cfg: &RunConfig, permutations: usize) -> Result<String> {
    let n = cfg.neighbors_k.unwrap_or(4).max(2);
    let model = cfg.model.clone();
    let weights = Weights::init(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let contexts: Vec<(String, String)> = (0..n)
        .map(|i| (format!("c{i:03}"), synth_text(&mut rng, 48)))
        .collect();
    let refs: Vec<(&str, &str)> = contexts
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();
    let target = synth_text(&mut rng, 48);
    let l_ctx = 64.min(model.max_pos / 2);
    let store = CacheStore::build(&weights, &refs, l_ctx, cfg.workers)?;
    let instruction = cfg
        .instruction
        .as_deref()
        .map(instructions::resolve)
        .unwrap_or_else(|| "Summarize the above related segments for encoding: ".to_string());

    // deterministic permutations of 0..n
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        perms.push(p);
    }

    let mut csv = String::from("strategy,perm_i,perm_j,cosine_distance\n");
    let mut summary = String::new();
    for strategy in [Strategy::Seq, Strategy::Par, Strategy::ParDistill] {
        let mut embeddings: Vec<Vec<f32>> = Vec::with_capacity(perms.len());
        for p in &perms {
            let related: Vec<String> = p.iter().map(|&i| contexts[i].0.clone()).collect();
            let texts: Vec<&str> = p.iter().map(|&i| contexts[i].1.as_str()).collect();
            let emb = match strategy {
                Strategy::Seq => {
                    encode_seq(&weights, &texts, &target, &SeqOptions::new(model.max_pos))?
                }
                Strategy::Par => encode_par(&weights, &store, &related, &target)?,
                Strategy::ParDistill => {
                    encode_par_distill(&weights, &store, &related, &instruction, &target)?
                }
                Strategy::Individual => unreachable!(),
            };
            embeddings.push(emb.vector);
        }
        let mut max_dist = 0.0f64;
        for i in 0..embeddings.len() {
            for j in i + 1..embeddings.len() {
                let dist = crate::model::cosine_distance(&embeddings[i], &embeddings[j]);
                max_dist = max_dist.max(dist);
                writeln!(csv, "{strategy},{i},{j},{dist:.3e}").unwrap();
            }
        }
        writeln!(summary, "{strategy}: max pairwise cosine distance {max_dist:.3e}").unwrap();
    }
    let path = cfg.output_path()?;
    std::fs::write(path, &csv)?;
    writeln!(summary, "distances written to {}", path.display()).unwrap();
    Ok(summary)
}

/// The length-scaling study: a planted retrieval task where each target's
/// relevant context appears first in its related list, so sequential
/// concatenation loses it to truncation as segments grow while the parallel
/// caches keep it.
pub fn cmd_bench_length(cfg: &RunConfig, lengths: &[usize]) -> Result<String> {
    let model = cfg.model.clone();
    let weights = Weights::init(&model)?;
    let l_ctx = cfg.l_ctx.min(model.max_pos / 2);
    let n_targets = 8usize;
    let n_distractors = 4usize;
    let objective = cfg.objective;

    let mut csv = format!("strategy,segment_tokens,metric,value\n");
    let mut summary = String::new();
    let mut gaps: Vec<(usize, f64)> = Vec::new();

    for &len in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ (len as u64) << 8);
        // planted corpus: each target's one relevant context is listed first
        // in its related set, so drop-head truncation discards it first; the
        // distractor contexts are shared across targets, leaving the relevant
        // context as the only thing that tells candidates apart
        let mut targets: Vec<(String, String)> = Vec::new();
        let mut contexts: Vec<(String, String)> = Vec::new();
        let mut related_of: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut relevant_text: Vec<String> = Vec::new();
        let shared: Vec<String> = (0..n_distractors).map(|d| format!("x{d:02}")).collect();
        for did in &shared {
            contexts.push((did.clone(), synth_text(&mut rng, len)));
        }
        for t in 0..n_targets {
            let tid = format!("t{t:02}");
            let ttext = format!("item {t:02} {}", synth_text(&mut rng, 24));
            let rel_id = format!("r{t:02}");
            let rel_text = synth_text(&mut rng, len);
            relevant_text.push(rel_text.clone());
            let mut related = vec![rel_id.clone()];
            related.extend(shared.iter().cloned());
            contexts.push((rel_id, rel_text));
            related_of.insert(tid.clone(), related);
            targets.push((tid, ttext));
        }
        let ctx_refs: Vec<(&str, &str)> = contexts
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let store = CacheStore::build(&weights, &ctx_refs, l_ctx, cfg.workers)?;
        let text_of: HashMap<&str, &str> = contexts
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();

        // queries are standalone encodings of each planted relevant context
        let queries: Vec<(String, Vec<f32>)> = relevant_text
            .iter()
            .enumerate()
            .map(|(t, text)| {
                encode_individual(&weights, text).map(|e| (format!("q{t:02}"), e.vector))
            })
            .collect::<Result<_>>()?;
        let qrels: BTreeMap<String, BTreeSet<String>> = (0..n_targets)
            .map(|t| {
                (
                    format!("q{t:02}"),
                    std::iter::once(format!("t{t:02}")).collect(),
                )
            })
            .collect();

        let mut metric_of = HashMap::new();
        for strategy in [Strategy::Individual, Strategy::Seq, Strategy::Par] {
            let candidates: Vec<(String, Vec<f32>)> = targets
                .iter()
                .map(|(tid, ttext)| {
                    let related = &related_of[tid];
                    let emb = match strategy {
                        Strategy::Individual => encode_individual(&weights, ttext)?,
                        Strategy::Seq => {
                            let texts: Vec<&str> =
                                related.iter().map(|r| text_of[r.as_str()]).collect();
                            encode_seq(
                                &weights,
                                &texts,
                                ttext,
                                &SeqOptions::new(model.max_pos).truncation(cfg.truncation),
                            )?
                        }
                        Strategy::Par => encode_par(&weights, &store, related, ttext)?,
                        Strategy::ParDistill => unreachable!(),
                    };
                    Ok((tid.clone(), emb.vector))
                })
                .collect::<Result<_>>()?;
            let task = EvalTask {
                kind: TaskKind::RetrievalGlobal,
                queries: queries.clone(),
                candidates,
                qrels: qrels.clone(),
                labels: BTreeMap::new(),
                pools: BTreeMap::new(),
            };
            let result = run_task(&task, &[objective], model.seed)?;
            let value = result.report.metrics[&objective.to_string()];
            metric_of.insert(strategy.as_str(), value);
            writeln!(csv, "{strategy},{len},{objective},{value}").unwrap();
        }
        let gap = metric_of["seq"] - metric_of["par"];
        gaps.push((len, gap));
        writeln!(
            summary,
            "len {len}: individual {:.4} seq {:.4} par {:.4} (seq-par gap {gap:+.4})",
            metric_of["individual"], metric_of["seq"], metric_of["par"]
        )
        .unwrap();
    }

    let path = cfg.output_path()?;
    std::fs::write(path, &csv)?;
    writeln!(summary, "metrics written to {}", path.display()).unwrap();
    Ok(summary)
}

/// The seq-minus-par metric gap per length, recomputed from a bench-length
/// CSV. Used by tests and reporting.
pub fn seq_par_gaps_from_csv(csv: &str) -> Result<Vec<(usize, f64)>> {
    let mut seq: BTreeMap<usize, f64> = BTreeMap::new();
    let mut par: BTreeMap<usize, f64> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!("bad bench csv line: {line}")));
        }
        let len: usize = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("bad length in: {line}")))?;
        let value: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Data(format!("bad value in: {line}")))?;
        match fields[0] {
            "seq" => {
                seq.insert(len, value);
            }
            "par" => {
                par.insert(len, value);
            }
            _ => {}
        }
    }
    Ok(seq
        .into_iter()
        .filter_map(|(len, s)| par.get(&len).map(|p| (len, s - p)))
        .collect())
}
