//! Error type shared across the library.
//!
//! Contract violations that callers can trigger with bad data (shape
//! mismatches, invalid axes, degenerate masks, malformed files or configs)
//! are reported as `DiscError`. Internal invariants that only a bug can
//! break are guarded with `debug_assert!` instead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiscError {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An axis index is out of range for the tensor's rank.
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    /// Attention was asked to normalize over an empty key set.
    #[error("attention: every key is masked out")]
    AllKeysMasked,

    /// A geometric argument is outside its valid domain.
    #[error("geometry: {0}")]
    Geometry(String),

    /// A query-construction precondition failed (grid tiling, ref bounds...).
    #[error("query construction: {0}")]
    Query(String),

    /// A loss has nothing to average over or was fed inconsistent grids.
    #[error("loss: {0}")]
    Loss(String),

    /// Metric accumulation over incompatible grids.
    #[error("metrics: {0}")]
    Metrics(String),

    /// Configuration file is malformed or fails validation.
    #[error("config: {0}")]
    Config(String),

    /// A serialized tensor or label volume is malformed.
    #[error("format: {0}")]
    Format(String),

    /// A non-finite value appeared where the pipeline guarantees finiteness.
    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiscError>;
