use thiserror::Error;

/// Errors produced by the numeric engine. None of these involve I/O; file
/// errors live in the CLI crate.
#[derive(Debug, Error)]
pub enum BqnError {
    /// A parameter failed validation (non-finite logit, empty grid, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Tensor shapes or connectivity do not line up.
    #[error("wiring error: {0}")]
    Wiring(String),

    /// Grids are incompatible for the requested operation.
    #[error("grid error: {0}")]
    Grid(String),

    /// A plain argument error (empty input list, label out of range, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// The forward pass produced a non-finite value; reports which layer.
    #[error("non-finite value in forward pass at layer {layer}: {what}")]
    NonFinite { layer: usize, what: String },

    /// An internal invariant was violated (e.g. large negative mass after IFFT).
    #[error("internal consistency error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, BqnError>;
