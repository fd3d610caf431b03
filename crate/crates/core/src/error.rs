use std::io;

use thiserror::Error;

/// Errors produced anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("insufficient samples: need at least {needed}, have {have}")]
    InsufficientSamples { needed: u64, have: u64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("{0} did not converge")]
    NoConvergence(&'static str),

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("compression ratio {0} outside [0, 1)")]
    InvalidRatio(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("sequence length {len} outside [{min}, {max}]")]
    SequenceLength { len: usize, min: usize, max: usize },

    #[error("missing statistics for layer {0}")]
    MissingStats(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
