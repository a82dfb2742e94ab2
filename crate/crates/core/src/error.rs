//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, training control, and run IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("`{op}` expects a scalar, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("not ready: {have} closed windows, need {need}")]
    NotReady { have: usize, need: usize },

    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),

    #[error("rank plan does not cover address {0}")]
    PlanMissingAddress(String),

    #[error("rank {rank} exceeds min(d_in, d_out) = {limit} for {address}")]
    RankTooLarge {
        address: String,
        rank: usize,
        limit: usize,
    },

    #[error("epoch {got} out of order, expected {expected}")]
    EpochOutOfOrder { got: usize, expected: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("idx format error: {0}")]
    IdxFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: check learning rate and data scaling")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("run directory is locked by another run: {0}")]
    DirectoryLocked(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    TomlParse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
