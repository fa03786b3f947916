//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor not found: {0}")]
    TensorNotFound(String),

    #[error("malformed tensor container: {0}")]
    TensorFormat(String),

    #[error("vocab/tensor size mismatch: vocab has {vocab} tokens, tensor has {rows} rows")]
    VocabSizeMismatch { vocab: usize, rows: usize },

    #[error("malformed vocab file: {0}")]
    VocabFormat(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("underdetermined system: need at least {needed} observations, got {got}")]
    Underdetermined { needed: usize, got: usize },

    #[error("rank-deficient least-squares system")]
    RankDeficient,

    #[error("token {0} has no cluster assignment")]
    UnassignedToken(u32),

    #[error("missing correctness label for token {0}")]
    MissingCorrectness(u32),

    #[error("insufficient candidates: requested {requested}, backend has {available}")]
    InsufficientCandidates { requested: usize, available: usize },

    #[error("fixture miss: {0}")]
    FixtureMiss(String),

    #[error("context absent from logit dump: {0:?}")]
    DumpMiss(String),

    #[error("operation not supported by this backend: {0}")]
    Unsupported(&'static str),

    #[error("backend request failed after {attempts} attempt(s): {message}")]
    Backend { attempts: usize, message: String },

    #[error("judge reply not parseable as yes/no: {0:?}")]
    JudgeUnparseable(String),

    #[error("answer extraction failed: {0:?}")]
    ExtractionFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}
