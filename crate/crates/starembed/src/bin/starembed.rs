//! Thin batch front door over the `starembed` library.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric degeneracy.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use starembed::cli::{self, Overrides, RunConfig, RunConfigFile};
use starembed::error::Error;

#[derive(Parser)]
#[command(
    name = "starembed",
    about = "Structure-aware text embeddings over star-shaped relation graphs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonFlags {
    /// Flat TOML config file; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Weight container to load instead of seeding
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    rope_base: Option<f32>,
    #[arg(long)]
    max_pos: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// individual | seq | par | par-distill | mean-pool | weighted-pool
    #[arg(long)]
    strategy: Option<String>,
    /// Shared positional span for parallel context caches
    #[arg(long)]
    l_ctx: Option<usize>,
    /// drop-head | faithful-tail
    #[arg(long)]
    truncation: Option<String>,
    /// as-given | degree | pagerank | semantic
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    neighbors_k: Option<usize>,
    /// Balancing coefficient in [0, 1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Grid step for alpha search
    #[arg(long)]
    alpha_step: Option<f64>,
    /// Instruction preset name or literal text (par-distill)
    #[arg(long)]
    instruction: Option<String>,
    /// Metrics, e.g. ndcg@10 recall@5 mrr
    #[arg(long, num_args = 1..)]
    metrics: Option<Vec<String>>,
    /// Objective metric for alpha search (defaults to the first metric)
    #[arg(long)]
    objective: Option<String>,
    /// PageRank damping factor
    #[arg(long)]
    damping: Option<f64>,
    /// Worker threads for cache building and embedding
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Optional per-query CSV beside the eval report
    #[arg(long)]
    per_query: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and print counts plus a degree histogram
    Ingest {
        /// Corpus file (one JSON record per line)
        corpus: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Build and persist KV caches for all selected neighbors
    BuildCache {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Embed every corpus segment under the configured strategy
    Embed {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Evaluate a task file against an embedding file
    Eval {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Grid-search the balancing coefficient against a task
    AlphaSearch {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Wall-time comparison across neighbor counts and segment lengths
    BenchTime {
        /// Neighbor counts to sweep
        #[arg(long, num_args = 1.., default_values_t = vec![1usize, 2, 4, 8, 16])]
        n: Vec<usize>,
        /// Segment token lengths to sweep
        #[arg(long = "len", num_args = 1.., default_values_t = vec![32usize, 64])]
        l: Vec<usize>,
        /// Timed repetitions per point (median reported)
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Pairwise embedding distances under permuted neighbor order
    BenchOrder {
        /// Number of random permutations
        #[arg(long, default_value_t = 10)]
        permutations: usize,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Planted retrieval metric as segment length grows
    BenchLength {
        /// Segment token lengths to sweep
        #[arg(long = "len", num_args = 1.., default_values_t = vec![64usize, 128, 256, 512])]
        lengths: Vec<usize>,
        #[command(flatten)]
        common: CommonFlags,
    },
}

fn overrides_of(c: &CommonFlags) -> Overrides {
    Overrides {
        weights: c.weights.clone(),
        n_layers: c.n_layers,
        n_heads: c.n_heads,
        d_model: c.d_model,
        rope_base: c.rope_base,
        max_pos: c.max_pos,
        seed: c.seed,
        strategy: c.strategy.clone(),
        l_ctx: c.l_ctx,
        truncation: c.truncation.clone(),
        selection: c.selection.clone(),
        neighbors_k: c.neighbors_k,
        alpha: c.alpha,
        alpha_step: c.alpha_step,
        instruction: c.instruction.clone(),
        metrics: c.metrics.clone(),
        objective: c.objective.clone(),
        damping: c.damping,
        workers: c.workers,
        corpus: c.corpus.clone(),
        task: c.task.clone(),
        cache_dir: c.cache_dir.clone(),
        embeddings: c.embeddings.clone(),
        output: c.output.clone(),
        per_query: c.per_query.clone(),
    }
}

fn resolve(common: &CommonFlags) -> Result<RunConfig, Error> {
    let file = match &common.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    RunConfig::resolve(file, overrides_of(common))
}

fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Ingest { corpus, common } => {
            let _ = resolve(&common)?;
            cli::cmd_ingest(&corpus)
        }
        Command::BuildCache { common } => cli::cmd_build_cache(&resolve(&common)?),
        Command::Embed { common } => cli::cmd_embed(&resolve(&common)?),
        Command::Eval { common } => cli::cmd_eval(&resolve(&common)?),
        Command::AlphaSearch { common } => {
            let (_, _, summary) = cli::cmd_alpha_search(&resolve(&common)?)?;
            Ok(summary)
        }
        Command::BenchTime { n, l, runs, common } => {
            cli::cmd_bench_time(&resolve(&common)?, &n, &l, runs)
        }
        Command::BenchOrder {
            permutations,
            common,
        } => cli::cmd_bench_order(&resolve(&common)?, permutations),
        Command::BenchLength { lengths, common } => {
            cli::cmd_bench_length(&resolve(&common)?, &lengths)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if err.use_stderr() => {
            // flag/usage problems map to exit code 1
            eprint!("{err}");
            return ExitCode::from(1);
        }
        Err(help) => {
            print!("{help}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let category = err.category();
            eprintln!("error: {}: {err}", category.as_str());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
