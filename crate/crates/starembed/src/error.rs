//! Error type shared across the crate.
//!
//! Every error belongs to one of three categories, which the CLI maps to
//! process exit codes: usage (1), data (2), numeric degeneracy (3).

use thiserror::Error;

/// Coarse error class used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad flags, bad config fields, inconsistent options. Exit code 1.
    Usage,
    /// Malformed or inconsistent input data, IO failures. Exit code 2.
    Data,
    /// Numerically degenerate results (zero norms, non-finite scores). Exit code 3.
    Degenerate,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Degenerate => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("duplicate segment id `{id}`")]
    DuplicateId { id: String },

    #[error("malformed record on line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("unknown id `{id}`")]
    UnknownId { id: String },

    #[error("bad magic bytes: not a tensor container")]
    BadMagic,

    #[error("tensor `{name}`: expected shape {expected}, found {actual}")]
    ShapeMismatch {
        name: String,
        expected: String,
        actual: String,
    },

    #[error("truncated container payload: {0}")]
    Truncated(String),

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("position id {pos} exceeds max_pos {max_pos}")]
    PositionOverflow { pos: usize, max_pos: usize },

    #[error("past KV has {actual} layers, model has {expected}")]
    LayerCountMismatch { expected: usize, actual: usize },

    #[error("target alone is {tokens} tokens, exceeding the {budget}-token budget")]
    TargetTooLong { tokens: usize, budget: usize },

    #[error("instruction is {tokens} tokens, exceeding the {budget}-token budget")]
    InstructionTooLong { tokens: usize, budget: usize },

    #[error("no embedding found for id `{id}`")]
    MissingEmbedding { id: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate vector: norm is zero or non-finite")]
    DegenerateNorm,

    #[error("degenerate mean: vectors cancel to (near) zero")]
    DegenerateMean,

    #[error("non-finite score at alpha={alpha}")]
    NonFiniteScore { alpha: f64 },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Usage,
            Error::DegenerateNorm | Error::DegenerateMean | Error::NonFiniteScore { .. } => {
                ErrorCategory::Degenerate
            }
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
