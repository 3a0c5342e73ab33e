//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]; callers match on
//! variants rather than parsing strings.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },

    #[error("non-finite value produced in {op}")]
    NonFinite { op: &'static str },

    #[error("matrix for solve_spd is not square or not symmetric within tolerance")]
    NotSymmetric,

    #[error("matrix not positive definite after ridge {ridge}; retry with a larger ridge")]
    NotPositiveDefinite { ridge: f64 },

    #[error("gradient queried for a node that is not a tracked parameter on this tape")]
    DetachedNode,

    #[error("backward requires a scalar (1x1) loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("sequence length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },

    #[error("loss became NaN at step {step}")]
    NanLoss { step: usize },

    #[error("unknown module name: {0}")]
    UnknownModule(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint io error: {0}")]
    CheckpointIo(#[from] std::io::Error),

    #[error("symbol pool exhausted while generating {what}")]
    PoolExhausted { what: String },

    #[error("injection budget of {steps} steps exhausted with best fingerprint success {best_fsr:.2}%")]
    BudgetExhausted { steps: usize, best_fsr: f64 },

    #[error("value optimization stalled above {threshold} nats/token (best {best:.4}) after {steps} steps")]
    ValueOptStalled { steps: usize, best: f64, threshold: f64 },

    #[error("no routing threshold separates fingerprint scores (min {fp_min:.4e}) from regular scores (max {regular_max:.4e})")]
    NoThresholdSeparation { fp_min: f64, regular_max: f64 },

    #[error("module {0} shows zero weight difference; no subspace to compute")]
    ZeroSubspace(String),

    #[error("rank correlation undefined: {0} series is constant")]
    UndefinedCorrelation(&'static str),

    #[error("input rank {rank} is below the requested {dims} projection dimensions")]
    RankDeficient { rank: usize, dims: usize },

    #[error("calibration activations required for this pruning method")]
    MissingCalibration,
}
