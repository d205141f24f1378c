//! Text segments, directed relations, and neighbor selection.
//!
//! A corpus is a set of text segments; a relation graph is a set of directed
//! edges between them. Each segment's out-neighbors form a star around it,
//! and the three selection criteria (total degree, PageRank, semantic
//! similarity) pick which neighbors participate in structure-aware encoding.
//!
//! The corpus file is line-delimited JSON, one record per line:
//!
//! ```json
//! {"id": "a", "text": "...", "related": ["b", "c"], "label": "optional"}
//! ```
//!
//! Both corpus and graph are immutable after loading and safe to share across
//! threads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::cosine;

/// One text unit: a unique id, its UTF-8 text, and an optional class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: String,
    pub text: String,
    pub label: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    id: String,
    text: String,
    #[serde(default)]
    related: Vec<String>,
    #[serde(default)]
    label: Option<String>,
}

/// All segments of a corpus, in file order, with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    segments: Vec<Segment>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&Segment> {
        self.index
            .get(id)
            .map(|&i| &self.segments[i])
            .ok_or_else(|| Error::UnknownId { id: id.to_string() })
    }

    /// Segments in insertion (file) order.
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|s| s.id.as_str())
    }

    fn insert(&mut self, segment: Segment) -> Result<()> {
        if self.index.contains_key(&segment.id) {
            return Err(Error::DuplicateId { id: segment.id });
        }
        self.index.insert(segment.id.clone(), self.segments.len());
        self.segments.push(segment);
        Ok(())
    }
}

/// Directed relation set with per-node adjacency in insertion order.
/// Self-loops and duplicate edges are never stored.
#[derive(Debug, Clone, Default)]
pub struct RelationGraph {
    nodes: Vec<String>,
    node_index: HashMap<String, usize>,
    out: Vec<Vec<usize>>,
    in_degree: Vec<usize>,
    edge_count: usize,
}

impl RelationGraph {
    fn add_node(&mut self, id: &str) -> usize {
        if let Some(&i) = self.node_index.get(id) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(id.to_string());
        self.node_index.insert(id.to_string(), i);
        self.out.push(Vec::new());
        self.in_degree.push(0);
        i
    }

    fn add_edge(&mut self, src: usize, dst: usize) {
        if src == dst || self.out[src].contains(&dst) {
            return;
        }
        self.out[src].push(dst);
        self.in_degree[dst] += 1;
        self.edge_count += 1;
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn contains(&self, id: &str) -> bool {
        self.node_index.contains_key(id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|s| s.as_str())
    }

    /// Out-neighbors of `id` in insertion order.
    pub fn out_neighbors(&self, id: &str) -> Result<Vec<&str>> {
        let &i = self
            .node_index
            .get(id)
            .ok_or_else(|| Error::UnknownId { id: id.to_string() })?;
        Ok(self.out[i].iter().map(|&j| self.nodes[j].as_str()).collect())
    }

    /// Total degree (in + out), the default "degree" notion of this crate.
    pub fn total_degree(&self, id: &str) -> Result<usize> {
        let &i = self
            .node_index
            .get(id)
            .ok_or_else(|| Error::UnknownId { id: id.to_string() })?;
        Ok(self.out[i].len() + self.in_degree[i])
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.out.iter().enumerate().flat_map(move |(src, dsts)| {
            dsts.iter()
                .map(move |&dst| (self.nodes[src].as_str(), self.nodes[dst].as_str()))
        })
    }
}

/// A loaded corpus plus its relation graph and any load-time warnings
/// (dangling references, dropped self-loops).
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub graph: RelationGraph,
    pub warnings: Vec<String>,
}

/// Load a line-delimited corpus file. Duplicate ids and malformed lines are
/// hard errors; edges to unknown ids are dropped with a warning each.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut corpus = Corpus::default();
    let mut raw_edges: Vec<(String, Vec<String>)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SegmentRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: lineno,
                msg: e.to_string(),
            })?;
        if record.id.is_empty() {
            return Err(Error::MalformedRecord {
                line: lineno,
                msg: "empty id".into(),
            });
        }
        corpus.insert(Segment {
            id: record.id.clone(),
            text: record.text,
            label: record.label,
        })?;
        raw_edges.push((record.id, record.related));
    }

    let mut graph = RelationGraph::default();
    for segment in corpus.segments() {
        graph.add_node(&segment.id);
    }
    let mut warnings = Vec::new();
    for (src, related) in raw_edges {
        let src_idx = graph.node_index[&src];
        for dst in related {
            if dst == src {
                warnings.push(format!("self-loop on `{src}` dropped"));
                continue;
            }
            match graph.node_index.get(&dst) {
                Some(&dst_idx) => graph.add_edge(src_idx, dst_idx),
                None => warnings.push(format!("edge `{src}` -> `{dst}` dropped: unknown id `{dst}`")),
            }
        }
    }

    Ok(LoadedCorpus {
        corpus,
        graph,
        warnings,
    })
}

/// How the related list of a neighborhood was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionKind {
    #[serde(rename = "as-given")]
    AsGiven,
    #[serde(rename = "degree")]
    Degree,
    #[serde(rename = "pagerank")]
    Pagerank,
    #[serde(rename = "semantic")]
    Semantic,
}

impl SelectionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionKind::AsGiven => "as-given",
            SelectionKind::Degree => "degree",
            SelectionKind::Pagerank => "pagerank",
            SelectionKind::Semantic => "semantic",
        }
    }
}

impl fmt::Display for SelectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-given" => Ok(SelectionKind::AsGiven),
            "degree" => Ok(SelectionKind::Degree),
            "pagerank" => Ok(SelectionKind::Pagerank),
            "semantic" => Ok(SelectionKind::Semantic),
            other => Err(Error::Config(format!("unknown selection `{other}`"))),
        }
    }
}

/// The star around one target: its related segment ids, ordered
/// deterministically by the selection that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub target: String,
    pub related: Vec<String>,
    pub selection: SelectionKind,
}

/// Out-neighbors of `id` in insertion order (selection "as-given").
pub fn neighbors(graph: &RelationGraph, id: &str) -> Result<Neighborhood> {
    let related = graph
        .out_neighbors(id)?
        .into_iter()
        .map(str::to_string)
        .collect();
    Ok(Neighborhood {
        target: id.to_string(),
        related,
        selection: SelectionKind::AsGiven,
    })
}

/// Ranking inputs for [`select_top_k`]. Degree needs only the graph;
/// PageRank needs precomputed scores; semantic needs the target embedding
/// plus one embedding per candidate neighbor.
pub enum Selector<'a> {
    Degree,
    Pagerank(&'a BTreeMap<String, f64>),
    Semantic {
        target: &'a [f32],
        candidates: &'a HashMap<String, Vec<f32>>,
    },
}

impl Selector<'_> {
    pub fn kind(&self) -> SelectionKind {
        match self {
            Selector::Degree => SelectionKind::Degree,
            Selector::Pagerank(_) => SelectionKind::Pagerank,
            Selector::Semantic { .. } => SelectionKind::Semantic,
        }
    }
}

/// The top-k out-neighbors of `id` under a criterion, ranked descending with
/// ties broken by ascending id. Fewer than k neighbors means all of them.
pub fn select_top_k(
    graph: &RelationGraph,
    selector: &Selector<'_>,
    id: &str,
    k: usize,
) -> Result<Neighborhood> {
    let candidates = graph.out_neighbors(id)?;
    if k == 0 {
        return Ok(Neighborhood {
            target: id.to_string(),
            related: Vec::new(),
            selection: selector.kind(),
        });
    }

    let mut scored: Vec<(f64, &str)> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let score = match selector {
            Selector::Degree => graph.total_degree(cand)? as f64,
            Selector::Pagerank(scores) => scores.get(cand).copied().unwrap_or(0.0),
            Selector::Semantic { target, candidates } => {
                let emb = candidates
                    .get(cand)
                    .ok_or_else(|| Error::MissingEmbedding { id: cand.to_string() })?;
                cosine(target, emb)
            }
        };
        scored.push((score, cand));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    });
    scored.truncate(k);

    Ok(Neighborhood {
        target: id.to_string(),
        related: scored.into_iter().map(|(_, id)| id.to_string()).collect(),
        selection: selector.kind(),
    })
}

/// PageRank by power iteration with uniform redistribution of dangling mass.
///
/// Stops when the L1 change drops below `tol` or after `max_iter` rounds.
/// Scores sum to 1 (up to `tol`). An empty graph yields an empty map.
pub fn pagerank(
    graph: &RelationGraph,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> BTreeMap<String, f64> {
    let n = graph.node_count();
    if n == 0 {
        return BTreeMap::new();
    }
    let uniform = 1.0 / n as f64;
    let mut scores = vec![uniform; n];
    let mut next = vec![0.0f64; n];

    for _ in 0..max_iter {
        let dangling: f64 = (0..n)
            .filter(|&i| graph.out[i].is_empty())
            .map(|i| scores[i])
            .sum();
        let base = (1.0 - damping) * uniform + damping * dangling * uniform;
        next.iter_mut().for_each(|v| *v = base);
        for i in 0..n {
            let outs = &graph.out[i];
            if outs.is_empty() {
                continue;
            }
            let share = damping * scores[i] / outs.len() as f64;
            for &j in outs {
                next[j] += share;
            }
        }
        let delta: f64 = scores.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut scores, &mut next);
        if delta < tol {
            break;
        }
    }

    graph
        .nodes
        .iter()
        .cloned()
        .zip(scores.iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    fn graph_of(edges: &[(&str, &str)], extra_nodes: &[&str]) -> RelationGraph {
        let mut g = RelationGraph::default();
        for n in extra_nodes {
            g.add_node(n);
        }
        for (s, d) in edges {
            let si = g.add_node(s);
            let di = g.add_node(d);
            g.add_edge(si, di);
        }
        g
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = write_corpus(&[]);
        let loaded = load_corpus(f.path()).unwrap();
        assert_eq!(loaded.corpus.len(), 0);
        assert_eq!(loaded.graph.edge_count(), 0);
    }

    #[test]
    fn duplicate_id_is_hard_error() {
        let f = write_corpus(&[
            r#"{"id": "a", "text": "one"}"#,
            r#"{"id": "a", "text": "two"}"#,
        ]);
        match load_corpus(f.path()) {
            Err(Error::DuplicateId { id }) => assert_eq!(id, "a"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_corpus(&[r#"{"id": "a", "text": "ok"}"#, "{not json"]);
        match load_corpus(f.path()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn three_line_corpus_transcribes() {
        let f = write_corpus(&[
            r#"{"id": "a", "text": "A", "related": ["b"]}"#,
            r#"{"id": "b", "text": "B", "related": ["c"]}"#,
            r#"{"id": "c", "text": "C", "related": []}"#,
        ]);
        let loaded = load_corpus(f.path()).unwrap();
        assert_eq!(loaded.corpus.len(), 3);
        let edges: Vec<_> = loaded.graph.edges().collect();
        assert_eq!(edges, vec![("a", "b"), ("b", "c")]);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn dangling_reference_warns_and_drops() {
        let f = write_corpus(&[r#"{"id": "a", "text": "A", "related": ["ghost"]}"#]);
        let loaded = load_corpus(f.path()).unwrap();
        assert_eq!(loaded.graph.edge_count(), 0);
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("ghost"));
    }

    #[test]
    fn duplicate_edges_collapse_and_self_loops_drop() {
        let f = write_corpus(&[
            r#"{"id": "a", "text": "", "related": ["b", "b", "a"]}"#,
            r#"{"id": "b", "text": ""}"#,
        ]);
        let loaded = load_corpus(f.path()).unwrap();
        assert_eq!(loaded.graph.edge_count(), 1);
        assert_eq!(loaded.warnings.len(), 1); // the self-loop
    }

    #[test]
    fn neighbors_in_insertion_order() {
        let g = graph_of(&[("a", "b"), ("a", "c")], &[]);
        let n = neighbors(&g, "a").unwrap();
        assert_eq!(n.related, vec!["b", "c"]);
        assert_eq!(n.selection, SelectionKind::AsGiven);
    }

    #[test]
    fn isolated_node_has_empty_neighborhood() {
        let g = graph_of(&[], &["d"]);
        assert!(neighbors(&g, "d").unwrap().related.is_empty());
    }

    #[test]
    fn direction_is_respected() {
        let g = graph_of(&[("b", "a")], &[]);
        assert!(neighbors(&g, "a").unwrap().related.is_empty());
        assert!(matches!(
            neighbors(&g, "zzz"),
            Err(Error::UnknownId { .. })
        ));
    }

    #[test]
    fn pagerank_mutual_pair_splits_evenly() {
        let g = graph_of(&[("a", "b"), ("b", "a")], &[]);
        let scores = pagerank(&g, 0.85, 1e-12, 1000);
        assert!((scores["a"] - 0.5).abs() < 1e-9);
        assert!((scores["b"] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn pagerank_star_center_dominates() {
        let g = graph_of(&[("l1", "c"), ("l2", "c"), ("l3", "c")], &[]);
        let scores = pagerank(&g, 0.85, 1e-12, 1000);
        for leaf in ["l1", "l2", "l3"] {
            assert!(scores["c"] > scores[leaf]);
        }
        let total: f64 = scores.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    // Frozen from an independent power-iteration oracle (tol 1e-12):
    // chain a->b->c, damping 0.85, dangling mass redistributed uniformly.
    #[test]
    fn pagerank_chain_matches_oracle() {
        let g = graph_of(&[("a", "b"), ("b", "c")], &[]);
        let scores = pagerank(&g, 0.85, 1e-12, 10_000);
        assert!((scores["a"] - 0.184416781927210).abs() < 1e-9);
        assert!((scores["b"] - 0.341171046565190).abs() < 1e-9);
        assert!((scores["c"] - 0.474412171507600).abs() < 1e-9);
    }

    #[test]
    fn pagerank_empty_graph_is_empty_map() {
        let g = RelationGraph::default();
        assert!(pagerank(&g, 0.85, 1e-9, 100).is_empty());
    }

    #[test]
    fn select_top_k_fewer_than_k_returns_all() {
        let g = graph_of(&[("a", "b"), ("a", "c")], &[]);
        let n = select_top_k(&g, &Selector::Degree, "a", 5).unwrap();
        assert_eq!(n.related.len(), 2);
    }

    #[test]
    fn select_top_k_degree_argmax() {
        // b participates in 3 edges total, c in 1
        let g = graph_of(&[("a", "b"), ("a", "c"), ("b", "x"), ("x", "b")], &[]);
        assert_eq!(g.total_degree("b").unwrap(), 3);
        assert_eq!(g.total_degree("c").unwrap(), 1);
        let n = select_top_k(&g, &Selector::Degree, "a", 1).unwrap();
        assert_eq!(n.related, vec!["b"]);
    }

    #[test]
    fn select_top_k_semantic_extremes() {
        let g = graph_of(&[("a", "b"), ("a", "c")], &[]);
        let e = vec![1.0f32, 0.0];
        let neg: Vec<f32> = e.iter().map(|v| -v).collect();
        let mut cands = HashMap::new();
        cands.insert("b".to_string(), e.clone());
        cands.insert("c".to_string(), neg);
        let sel = Selector::Semantic {
            target: &e,
            candidates: &cands,
        };
        let n = select_top_k(&g, &sel, "a", 1).unwrap();
        assert_eq!(n.related, vec!["b"]);
    }

    #[test]
    fn select_top_k_zero_k_and_unknown_id() {
        let g = graph_of(&[("a", "b")], &[]);
        assert!(select_top_k(&g, &Selector::Degree, "a", 0)
            .unwrap()
            .related
            .is_empty());
        assert!(select_top_k(&g, &Selector::Degree, "nope", 3).is_err());
    }

    #[test]
    fn select_top_k_ties_break_ascending_id() {
        // b and c have equal degree 1
        let g = graph_of(&[("a", "c"), ("a", "b")], &[]);
        let n = select_top_k(&g, &Selector::Degree, "a", 1).unwrap();
        assert_eq!(n.related, vec!["b"]);
    }

    #[test]
    fn select_top_k_is_deterministic() {
        let g = graph_of(&[("a", "b"), ("a", "c"), ("a", "d"), ("d", "b")], &[]);
        let first = select_top_k(&g, &Selector::Degree, "a", 2).unwrap();
        for _ in 0..5 {
            assert_eq!(select_top_k(&g, &Selector::Degree, "a", 2).unwrap(), first);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Apply a relabeling to a set of edges over nodes 0..n.
        fn relabel(edges: &[(usize, usize)], perm: &[usize]) -> Vec<(usize, usize)> {
            edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect()
        }

        fn build(n: usize, edges: &[(usize, usize)]) -> RelationGraph {
            let mut g = RelationGraph::default();
            for i in 0..n {
                g.add_node(&format!("n{i:02}"));
            }
            for &(s, d) in edges {
                if s != d {
                    let si = g.node_index[&format!("n{s:02}")];
                    let di = g.node_index[&format!("n{d:02}")];
                    g.add_edge(si, di);
                }
            }
            g
        }

        proptest! {
            #[test]
            fn pagerank_sums_to_one(edges in proptest::collection::vec((0usize..10, 0usize..10), 0..30)) {
                let g = build(10, &edges);
                let scores = pagerank(&g, 0.85, 1e-12, 10_000);
                let total: f64 = scores.values().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }

            #[test]
            fn pagerank_is_permutation_equivariant(
                edges in proptest::collection::vec((0usize..10, 0usize..10), 0..30),
                seed in 0u64..1000,
            ) {
                let g = build(10, &edges);
                let scores = pagerank(&g, 0.85, 1e-12, 10_000);

                // a deterministic pseudo-random permutation of 0..10
                let mut perm: Vec<usize> = (0..10).collect();
                let mut state = seed.wrapping_add(1);
                for i in (1..perm.len()).rev() {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    perm.swap(i, (state >> 33) as usize % (i + 1));
                }

                let g2 = build(10, &relabel(&edges, &perm));
                let scores2 = pagerank(&g2, 0.85, 1e-12, 10_000);
                for i in 0..10 {
                    let orig = scores[&format!("n{i:02}")];
                    let moved = scores2[&format!("n{:02}", perm[i])];
                    prop_assert!((orig - moved).abs() < 1e-12,
                        "node {i}: {orig} vs {moved}");
                }
            }
        }
    }
}
