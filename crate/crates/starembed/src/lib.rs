//! Structure-aware text embeddings over star-shaped relation graphs.
//!
//! Many corpora carry structure besides raw text: hyperlinks, citations,
//! co-purchases. This crate encodes a target segment *together with* its
//! linked neighbors, either by concatenating them into one sequence or by
//! letting the target attend to independently precomputed KV caches of each
//! neighbor, with a fixed positional-encoding budget regardless of how many
//! neighbors there are. Post-hoc aggregation baselines, context distillation,
//! semantic balancing, neighbor selection and a retrieval/classification/
//! clustering metric suite round out the engine.
//!
//! Everything runs on a small deterministic byte-level causal transformer, so
//! every pipeline is reproducible end to end on a laptop.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --example encode_strategies
//! cargo run --example parallel_cache
//! cargo run --example semantic_balancing
//! cargo run --example evaluate_retrieval
//! ```
//!
//! or the `starembed` binary for batch work (`starembed --help`).

pub mod aggregate;
pub mod cli;
pub mod container;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod instructions;
pub mod model;
pub mod oracle;
pub mod tokenizer;

pub use error::{Error, ErrorCategory, Result};
pub use model::{cosine, cosine_distance, EmbedKind, Embedding, ModelConfig, Weights};
