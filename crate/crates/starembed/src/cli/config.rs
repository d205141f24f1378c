//! Run configuration: a flat TOML file, overridable field-by-field from CLI
//! flags, with the resolved semantic subset echoed into every output for
//! provenance.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use serde_json::json;

use crate::corpus::SelectionKind;
use crate::encoder::{Strategy, TruncationPolicy};
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::model::{EmbedKind, ModelConfig, Weights};

/// An embedding method selectable from the CLI: the four in-process
/// strategies plus the two post-hoc aggregation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Strategy(Strategy),
    MeanPool,
    WeightedPool,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Strategy(s) => s.as_str(),
            Method::MeanPool => "mean-pool",
            Method::WeightedPool => "weighted-pool",
        }
    }

    pub fn embed_kind(&self) -> EmbedKind {
        match self {
            Method::Strategy(s) => s.embed_kind(),
            Method::MeanPool => EmbedKind::MeanPool,
            Method::WeightedPool => EmbedKind::WeightedPool,
        }
    }

    pub fn is_aggregation(&self) -> bool {
        matches!(self, Method::MeanPool | Method::WeightedPool)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-pool" => Ok(Method::MeanPool),
            "weighted-pool" => Ok(Method::WeightedPool),
            other => Ok(Method::Strategy(other.parse()?)),
        }
    }
}

/// The flat on-disk config. Unknown fields are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    // model
    pub weights: Option<PathBuf>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub rope_base: Option<f32>,
    pub max_pos: Option<usize>,
    pub seed: Option<u64>,
    // encoding
    pub strategy: Option<String>,
    pub l_ctx: Option<usize>,
    pub truncation: Option<String>,
    pub selection: Option<String>,
    pub neighbors_k: Option<usize>,
    pub alpha: Option<f64>,
    pub alpha_step: Option<f64>,
    pub instruction: Option<String>,
    // evaluation
    pub metrics: Option<Vec<String>>,
    pub objective: Option<String>,
    pub damping: Option<f64>,
    // execution (never echoed into outputs)
    pub workers: Option<usize>,
    // default paths (flags override; never echoed)
    pub corpus: Option<PathBuf>,
    pub task: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub per_query: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<RunConfigFile> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Field-level overrides collected from CLI flags. Any `Some` wins over the
/// config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub weights: Option<PathBuf>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub rope_base: Option<f32>,
    pub max_pos: Option<usize>,
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub l_ctx: Option<usize>,
    pub truncation: Option<String>,
    pub selection: Option<String>,
    pub neighbors_k: Option<usize>,
    pub alpha: Option<f64>,
    pub alpha_step: Option<f64>,
    pub instruction: Option<String>,
    pub metrics: Option<Vec<String>>,
    pub objective: Option<String>,
    pub damping: Option<f64>,
    pub workers: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub task: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub per_query: Option<PathBuf>,
}

/// The fully resolved configuration a command runs with.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub weights_path: Option<PathBuf>,
    pub model: ModelConfig,
    pub method: Method,
    pub l_ctx: usize,
    pub truncation: TruncationPolicy,
    pub selection: SelectionKind,
    pub neighbors_k: Option<usize>,
    pub alpha: Option<f64>,
    pub alpha_step: f64,
    pub instruction: Option<String>,
    pub metrics: Vec<Metric>,
    pub objective: Metric,
    pub damping: f64,
    pub workers: usize,
    pub corpus: Option<PathBuf>,
    pub task: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub per_query: Option<PathBuf>,
}

impl RunConfig {
    /// Merge file fields and flag overrides into a validated config.
    pub fn resolve(file: RunConfigFile, ov: Overrides) -> Result<RunConfig> {
        let pick = |o: Option<PathBuf>, f: Option<PathBuf>| o.or(f);

        let seed = ov.seed.or(file.seed).unwrap_or(42);
        let mut model = ModelConfig::new(
            ov.n_layers.or(file.n_layers).unwrap_or(2),
            ov.n_heads.or(file.n_heads).unwrap_or(4),
            ov.d_model.or(file.d_model).unwrap_or(64),
            seed,
        );
        if let Some(base) = ov.rope_base.or(file.rope_base) {
            model.rope_base = base;
        }
        if let Some(mp) = ov.max_pos.or(file.max_pos) {
            model.max_pos = mp;
        }
        model.validate()?;

        let method: Method = ov
            .strategy
            .or(file.strategy)
            .as_deref()
            .unwrap_or("individual")
            .parse()?;
        let truncation: TruncationPolicy = ov
            .truncation
            .or(file.truncation)
            .as_deref()
            .unwrap_or("drop-head")
            .parse()?;
        let selection: SelectionKind = ov
            .selection
            .or(file.selection)
            .as_deref()
            .unwrap_or("as-given")
            .parse()?;

        let alpha = ov.alpha.or(file.alpha);
        if let Some(a) = alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
            }
        }
        let alpha_step = ov
            .alpha_step
            .or(file.alpha_step)
            .unwrap_or(crate::aggregate::DEFAULT_ALPHA_STEP);
        crate::aggregate::alpha_grid(alpha_step)?;

        let metric_names = ov
            .metrics
            .or(file.metrics)
            .unwrap_or_else(|| vec!["ndcg@10".to_string()]);
        let metrics: Vec<Metric> = metric_names
            .iter()
            .map(|m| m.parse())
            .collect::<Result<_>>()?;
        if metrics.is_empty() {
            return Err(Error::Config("metrics list is empty".into()));
        }
        let objective = match ov.objective.or(file.objective) {
            Some(name) => name.parse()?,
            None => metrics[0],
        };

        let damping = ov.damping.or(file.damping).unwrap_or(0.85);
        if !(0.0 < damping && damping < 1.0) {
            return Err(Error::Config(format!("damping {damping} outside (0, 1)")));
        }

        let workers = ov.workers.or(file.workers).unwrap_or(1).max(1);
        let l_ctx = ov.l_ctx.or(file.l_ctx).unwrap_or(64);

        Ok(RunConfig {
            weights_path: pick(ov.weights, file.weights),
            model,
            method,
            l_ctx,
            truncation,
            selection,
            neighbors_k: ov.neighbors_k.or(file.neighbors_k),
            alpha,
            alpha_step,
            instruction: ov.instruction.or(file.instruction),
            metrics,
            objective,
            damping,
            workers,
            corpus: pick(ov.corpus, file.corpus),
            task: pick(ov.task, file.task),
            cache_dir: pick(ov.cache_dir, file.cache_dir),
            embeddings: pick(ov.embeddings, file.embeddings),
            output: pick(ov.output, file.output),
            per_query: pick(ov.per_query, file.per_query),
        })
    }

    pub fn load_weights(&self) -> Result<Weights> {
        match &self.weights_path {
            Some(path) => Weights::load(path),
            None => Weights::init(&self.model),
        }
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus path given".into()))
    }

    pub fn task_path(&self) -> Result<&Path> {
        self.task
            .as_deref()
            .ok_or_else(|| Error::Config("no task path given".into()))
    }

    pub fn output_path(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::Config("no output path given".into()))
    }

    pub fn embeddings_path(&self) -> Result<&Path> {
        self.embeddings
            .as_deref()
            .ok_or_else(|| Error::Config("no embeddings path given".into()))
    }

    pub fn cache_dir_path(&self) -> Result<&Path> {
        self.cache_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no cache directory given".into()))
    }

    /// The semantic fields echoed into outputs. Worker counts and paths are
    /// execution details that cannot change results, so they stay out and
    /// outputs stay byte-identical across machines and worker counts.
    pub fn provenance(&self, weights: &Weights) -> serde_json::Value {
        json!({
            "model": {
                "n_layers": self.model.n_layers,
                "n_heads": self.model.n_heads,
                "d_model": self.model.d_model,
                "vocab": self.model.vocab,
                "rope_base": self.model.rope_base,
                "max_pos": self.model.max_pos,
                "seed": self.model.seed,
            },
            "weights_fingerprint": weights.fingerprint(),
            "strategy": self.method.as_str(),
            "l_ctx": self.l_ctx,
            "truncation": self.truncation.as_str(),
            "selection": self.selection.as_str(),
            "neighbors_k": self.neighbors_k,
            "alpha": self.alpha,
            "alpha_step": self.alpha_step,
            "instruction": self.instruction,
            "metrics": self.metrics.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
            "objective": self.objective.to_string(),
            "damping": self.damping,
        })
    }
}
