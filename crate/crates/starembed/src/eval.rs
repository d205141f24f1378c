//! Metrics and task runners: retrieval, per-query ranking, nearest-centroid
//! classification, and clustering.
//!
//! All ranking metrics use binary relevance. Averages across queries are
//! arithmetic (macro) over the queries that have at least one relevant
//! candidate; queries with empty qrels are skipped and counted in the report
//! metadata. Entropies in the V-measure use natural logs (the value is
//! base-invariant).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::cosine;

/// What a task evaluates and how candidates are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Each query ranks the full candidate pool.
    #[serde(rename = "retrieval-global")]
    RetrievalGlobal,
    /// Each query ranks only its own candidate list.
    #[serde(rename = "ranking-per-query")]
    RankingPerQuery,
    /// Queries are assigned the nearest class centroid built from labeled
    /// candidates.
    #[serde(rename = "classification")]
    Classification,
    /// Queries are clustered with k-means and scored by V-measure.
    #[serde(rename = "clustering")]
    Clustering,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::RetrievalGlobal => "retrieval-global",
            TaskKind::RankingPerQuery => "ranking-per-query",
            TaskKind::Classification => "classification",
            TaskKind::Clustering => "clustering",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval-global" => Ok(TaskKind::RetrievalGlobal),
            "ranking-per-query" => Ok(TaskKind::RankingPerQuery),
            "classification" => Ok(TaskKind::Classification),
            "clustering" => Ok(TaskKind::Clustering),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

/// A fully resolved evaluation task (embeddings already looked up).
#[derive(Debug, Clone)]
pub struct EvalTask {
    pub kind: TaskKind,
    pub queries: Vec<(String, Vec<f32>)>,
    pub candidates: Vec<(String, Vec<f32>)>,
    /// query id -> relevant candidate ids
    pub qrels: BTreeMap<String, BTreeSet<String>>,
    /// id -> class label (candidates for centroids, queries for ground truth)
    pub labels: BTreeMap<String, String>,
    /// query id -> candidate list, for ranking-per-query
    pub pools: BTreeMap<String, Vec<String>>,
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        let cand_ids: BTreeSet<&str> = self.candidates.iter().map(|(id, _)| id.as_str()).collect();
        for (q, rels) in &self.qrels {
            for r in rels {
                if !cand_ids.contains(r.as_str()) {
                    return Err(Error::Data(format!(
                        "qrel for query `{q}` names unknown candidate `{r}`"
                    )));
                }
            }
        }
        for (q, pool) in &self.pools {
            for c in pool {
                if !cand_ids.contains(c.as_str()) {
                    return Err(Error::Data(format!(
                        "pool for query `{q}` names unknown candidate `{c}`"
                    )));
                }
            }
        }
        if matches!(self.kind, TaskKind::Classification | TaskKind::Clustering) {
            let classes: BTreeSet<&str> = self.labels.values().map(String::as_str).collect();
            if classes.len() < 2 {
                return Err(Error::Data(format!(
                    "{} task needs at least 2 classes, found {}",
                    self.kind,
                    classes.len()
                )));
            }
        }
        Ok(())
    }
}

/// One requested metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Ndcg(usize),
    Recall(usize),
    Hit(usize),
    Mrr,
    Accuracy,
    MacroF1,
    VMeasure,
}

impl Metric {
    pub fn applies_to(&self, kind: TaskKind) -> bool {
        match self {
            Metric::Ndcg(_) | Metric::Recall(_) | Metric::Hit(_) | Metric::Mrr => matches!(
                kind,
                TaskKind::RetrievalGlobal | TaskKind::RankingPerQuery
            ),
            Metric::Accuracy | Metric::MacroF1 => kind == TaskKind::Classification,
            Metric::VMeasure => kind == TaskKind::Clustering,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Hit(k) => write!(f, "hit@{k}"),
            Metric::Mrr => f.write_str("mrr"),
            Metric::Accuracy => f.write_str("accuracy"),
            Metric::MacroF1 => f.write_str("macro_f1"),
            Metric::VMeasure => f.write_str("v_measure"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let at_k = |name: &str| -> Result<usize> {
            s[name.len() + 1..]
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| Error::Config(format!("bad k in metric `{s}`")))
        };
        if s.starts_with("ndcg@") {
            return Ok(Metric::Ndcg(at_k("ndcg")?));
        }
        if s.starts_with("recall@") {
            return Ok(Metric::Recall(at_k("recall")?));
        }
        if s.starts_with("hit@") {
            return Ok(Metric::Hit(at_k("hit")?));
        }
        match s {
            "mrr" => Ok(Metric::Mrr),
            "accuracy" => Ok(Metric::Accuracy),
            "macro_f1" => Ok(Metric::MacroF1),
            "v_measure" => Ok(Metric::VMeasure),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Metric values plus evaluation metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: TaskKind,
    pub metrics: BTreeMap<String, f64>,
    pub queries_evaluated: usize,
    pub skipped_empty_qrels: usize,
}

/// One per-query metric value, for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerQueryRow {
    pub query: String,
    pub metric: String,
    pub value: f64,
}

/// Task outcome: the aggregated report and per-query rows (ranking tasks).
#[derive(Debug, Clone)]
pub struct TaskResult {
    pub report: MetricReport,
    pub per_query: Vec<PerQueryRow>,
}

/// Candidate ids by descending cosine to the query, ties by ascending id.
pub fn rank_candidates(query: &[f32], candidates: &[(String, Vec<f32>)]) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = candidates
        .iter()
        .map(|(id, emb)| (cosine(query, emb), id.as_str()))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    });
    scored.into_iter().map(|(_, id)| id.to_string()).collect()
}

/// Binary-relevance nDCG@k: DCG over relevant hits in the top k, normalized
/// by the ideal DCG over `min(k, |relevant|)` slots. Zero when nothing is
/// relevant.
pub fn ndcg_at_k(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(*id))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(relevant.len()))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    dcg / ideal
}

pub fn recall_at_k(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranking.iter().take(k).filter(|id| relevant.contains(*id)).count();
    hits as f64 / relevant.len() as f64
}

pub fn hit_at_k(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if ranking.iter().take(k).any(|id| relevant.contains(id)) {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank of the first relevant candidate anywhere in the ranking.
pub fn mrr(ranking: &[String], relevant: &BTreeSet<String>) -> f64 {
    ranking
        .iter()
        .position(|id| relevant.contains(id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Renormalized mean embedding per class. Every class needs >= 1 example.
pub fn class_centroids(
    labeled: &[(String, Vec<f32>, String)],
) -> Result<BTreeMap<String, Vec<f32>>> {
    if labeled.is_empty() {
        return Err(Error::EmptyInput("class_centroids over zero examples"));
    }
    let mut by_class: BTreeMap<&str, Vec<(&str, &[f32])>> = BTreeMap::new();
    for (id, emb, class) in labeled {
        by_class.entry(class).or_default().push((id, emb));
    }
    let mut centroids = BTreeMap::new();
    for (class, members) in by_class {
        let pooled = crate::aggregate::mean_pool(&members)?;
        centroids.insert(class.to_string(), pooled.vector);
    }
    Ok(centroids)
}

/// Nearest class by cosine, ties broken by ascending class name.
pub fn classify(embedding: &[f32], centroids: &BTreeMap<String, Vec<f32>>) -> Result<String> {
    let mut best: Option<(f64, &str)> = None;
    for (class, centroid) in centroids {
        let c = cosine(embedding, centroid);
        // strictly-greater keeps the first (ascending) class on ties
        if best.map_or(true, |(s, _)| c > s) {
            best = Some((c, class));
        }
    }
    best.map(|(_, class)| class.to_string())
        .ok_or(Error::EmptyInput("classify with zero centroids"))
}

/// Lloyd's k-means with k-means++ seeding. Deterministic given `seed`.
pub fn kmeans(
    points: &[Vec<f32>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 {
        return Err(Error::Data("kmeans with k = 0".into()));
    }
    if k > n {
        return Err(Error::Data(format!("kmeans with k = {k} > {n} points")));
    }
    let dim = points[0].len();
    let dist2 = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum()
    };

    // k-means++ seeding
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let as_f64 = |p: &[f32]| -> Vec<f64> { p.iter().map(|&v| v as f64).collect() };
    centers.push(as_f64(&points[chosen[0]]));
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| {
                        p.iter()
                            .zip(c)
                            .map(|(&x, &y)| {
                                let d = x as f64 - y;
                                d * d
                            })
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // every remaining point coincides with a center
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut dart = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        chosen.push(next);
        centers.push(as_f64(&points[next]));
    }

    // Lloyd iterations
    let mut assignment = vec![0usize; n];
    for _ in 0..max_iter {
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d: f64 = p
                    .iter()
                    .zip(center)
                    .map(|(&x, &y)| {
                        let d = x as f64 - y;
                        d * d
                    })
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its center
            }
            let mut delta = 0.0f64;
            for (s, old) in sums[c].iter().zip(&centers[c]) {
                let new = s / counts[c] as f64;
                delta += (new - old) * (new - old);
            }
            for (old, s) in centers[c].iter_mut().zip(&sums[c]) {
                *old = s / counts[c] as f64;
            }
            shift = shift.max(delta.sqrt());
        }
        if shift < tol {
            break;
        }
    }
    let _ = dist2;
    Ok(assignment)
}

/// V-measure: weighted harmonic mean of homogeneity and completeness from the
/// label/cluster contingency table. 1.0 for a perfect clustering up to
/// relabeling; beta > 1 favors completeness.
pub fn v_measure<L, C>(truth: &[L], assignment: &[C], beta: f64) -> f64
where
    L: Eq + std::hash::Hash,
    C: Eq + std::hash::Hash,
{
    assert_eq!(truth.len(), assignment.len(), "label/assignment length mismatch");
    let n = truth.len();
    if n == 0 {
        return 0.0;
    }

    // map arbitrary keys to dense indices in first-seen order
    fn dense_indices<T: Eq + std::hash::Hash>(items: &[T]) -> (Vec<usize>, usize) {
        let mut ids: HashMap<&T, usize> = HashMap::new();
        let idx = items
            .iter()
            .map(|item| {
                let next = ids.len();
                *ids.entry(item).or_insert(next)
            })
            .collect();
        let count = ids.len();
        (idx, count)
    }
    let (li, n_labels) = dense_indices(truth);
    let (ci, n_clusters) = dense_indices(assignment);

    let mut contingency = vec![vec![0usize; n_clusters]; n_labels];
    let mut label_count = vec![0usize; n_labels];
    let mut cluster_count = vec![0usize; n_clusters];
    for (&l, &c) in li.iter().zip(&ci) {
        contingency[l][c] += 1;
        label_count[l] += 1;
        cluster_count[c] += 1;
    }

    let nf = n as f64;
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_c = entropy(&label_count);
    let h_k = entropy(&cluster_count);

    let mut h_c_given_k = 0.0f64;
    let mut h_k_given_c = 0.0f64;
    for l in 0..n_labels {
        for c in 0..n_clusters {
            let joint = contingency[l][c];
            if joint == 0 {
                continue;
            }
            let p = joint as f64 / nf;
            h_c_given_k -= p * (joint as f64 / cluster_count[c] as f64).ln();
            h_k_given_c -= p * (joint as f64 / label_count[l] as f64).ln();
        }
    }

    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let denom = beta * homogeneity + completeness;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta) * homogeneity * completeness / denom
    }
}

/// Pairwise (tree) summation so the reduction is insensitive to chunking.
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Run every requested metric over the task. `seed` drives the k-means
/// clustering; ranking tasks ignore it.
pub fn run_task(task: &EvalTask, metrics: &[Metric], seed: u64) -> Result<TaskResult> {
    task.validate()?;
    if metrics.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    for m in metrics {
        if !m.applies_to(task.kind) {
            return Err(Error::Config(format!(
                "metric {m} does not apply to task kind {}",
                task.kind
            )));
        }
    }
    match task.kind {
        TaskKind::RetrievalGlobal | TaskKind::RankingPerQuery => ranking_task(task, metrics),
        TaskKind::Classification => classification_task(task, metrics),
        TaskKind::Clustering => clustering_task(task, metrics, seed),
    }
}

fn ranking_task(task: &EvalTask, metrics: &[Metric]) -> Result<TaskResult> {
    let by_id: HashMap<&str, &Vec<f32>> = task
        .candidates
        .iter()
        .map(|(id, emb)| (id.as_str(), emb))
        .collect();
    let empty = BTreeSet::new();

    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut per_query: Vec<PerQueryRow> = Vec::new();
    let mut evaluated = 0usize;
    let mut skipped = 0usize;

    for (qid, qemb) in &task.queries {
        let relevant = task.qrels.get(qid).unwrap_or(&empty);
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let pool: Vec<(String, Vec<f32>)> = match task.kind {
            TaskKind::RetrievalGlobal => task.candidates.clone(),
            TaskKind::RankingPerQuery => {
                let ids = task.pools.get(qid).ok_or_else(|| {
                    Error::Data(format!("no candidate pool for query `{qid}`"))
                })?;
                ids.iter()
                    .map(|id| {
                        by_id
                            .get(id.as_str())
                            .map(|emb| (id.clone(), (*emb).clone()))
                            .ok_or_else(|| Error::MissingEmbedding { id: id.clone() })
                    })
                    .collect::<Result<_>>()?
            }
            _ => unreachable!(),
        };
        let ranking = rank_candidates(qemb, &pool);
        evaluated += 1;
        for m in metrics {
            let value = match m {
                Metric::Ndcg(k) => ndcg_at_k(&ranking, relevant, *k),
                Metric::Recall(k) => recall_at_k(&ranking, relevant, *k),
                Metric::Hit(k) => hit_at_k(&ranking, relevant, *k),
                Metric::Mrr => mrr(&ranking, relevant),
                _ => unreachable!(),
            };
            per_metric.entry(m.to_string()).or_default().push(value);
            per_query.push(PerQueryRow {
                query: qid.clone(),
                metric: m.to_string(),
                value,
            });
        }
    }

    let mut report = BTreeMap::new();
    for (name, values) in per_metric {
        let mean = if values.is_empty() {
            0.0
        } else {
            pairwise_sum(&values) / values.len() as f64
        };
        report.insert(name, mean);
    }
    // a task where every query was skipped still reports each metric as 0
    for m in metrics {
        report.entry(m.to_string()).or_insert(0.0);
    }

    Ok(TaskResult {
        report: MetricReport {
            kind: task.kind,
            metrics: report,
            queries_evaluated: evaluated,
            skipped_empty_qrels: skipped,
        },
        per_query,
    })
}

fn classification_task(task: &EvalTask, metrics: &[Metric]) -> Result<TaskResult> {
    let labeled: Vec<(String, Vec<f32>, String)> = task
        .candidates
        .iter()
        .map(|(id, emb)| {
            task.labels
                .get(id)
                .map(|class| (id.clone(), emb.clone(), class.clone()))
                .ok_or_else(|| Error::Data(format!("candidate `{id}` has no label")))
        })
        .collect::<Result<_>>()?;
    let centroids = class_centroids(&labeled)?;

    let mut truths: Vec<&str> = Vec::new();
    let mut preds: Vec<String> = Vec::new();
    for (qid, qemb) in &task.queries {
        let truth = task
            .labels
            .get(qid)
            .ok_or_else(|| Error::Data(format!("query `{qid}` has no label")))?;
        truths.push(truth);
        preds.push(classify(qemb, &centroids)?);
    }

    let correct = truths
        .iter()
        .zip(&preds)
        .filter(|(t, p)| **t == p.as_str())
        .count();
    let accuracy = if truths.is_empty() {
        0.0
    } else {
        correct as f64 / truths.len() as f64
    };

    let mut report = BTreeMap::new();
    for m in metrics {
        let value = match m {
            Metric::Accuracy => accuracy,
            Metric::MacroF1 => macro_f1(&truths, &preds),
            _ => unreachable!(),
        };
        report.insert(m.to_string(), value);
    }
    Ok(TaskResult {
        report: MetricReport {
            kind: task.kind,
            metrics: report,
            queries_evaluated: truths.len(),
            skipped_empty_qrels: 0,
        },
        per_query: Vec::new(),
    })
}

/// Macro-averaged F1 over the union of true and predicted classes.
pub fn macro_f1(truths: &[&str], preds: &[String]) -> f64 {
    let classes: BTreeSet<&str> = truths
        .iter()
        .copied()
        .chain(preds.iter().map(String::as_str))
        .collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut f1_sum = 0.0f64;
    for class in &classes {
        let tp = truths
            .iter()
            .zip(preds)
            .filter(|(t, p)| *t == class && p.as_str() == *class)
            .count() as f64;
        let fp = truths
            .iter()
            .zip(preds)
            .filter(|(t, p)| *t != class && p.as_str() == *class)
            .count() as f64;
        let fn_ = truths
            .iter()
            .zip(preds)
            .filter(|(t, p)| *t == class && p.as_str() != *class)
            .count() as f64;
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
    }
    f1_sum / classes.len() as f64
}

fn clustering_task(task: &EvalTask, metrics: &[Metric], seed: u64) -> Result<TaskResult> {
    let mut truths: Vec<&str> = Vec::new();
    let mut points: Vec<Vec<f32>> = Vec::new();
    for (qid, qemb) in &task.queries {
        let truth = task
            .labels
            .get(qid)
            .ok_or_else(|| Error::Data(format!("query `{qid}` has no label")))?;
        truths.push(truth);
        points.push(qemb.clone());
    }
    let k = truths.iter().collect::<BTreeSet<_>>().len();
    let assignment = kmeans(&points, k, seed, 100, 1e-6)?;

    let mut report = BTreeMap::new();
    for m in metrics {
        let value = match m {
            Metric::VMeasure => v_measure(&truths, &assignment, 1.0),
            _ => unreachable!(),
        };
        report.insert(m.to_string(), value);
    }
    Ok(TaskResult {
        report: MetricReport {
            kind: task.kind,
            metrics: report,
            queries_evaluated: truths.len(),
            skipped_empty_qrels: 0,
        },
        per_query: Vec::new(),
    })
}
