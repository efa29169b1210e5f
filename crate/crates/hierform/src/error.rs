//! Crate-wide error type and result alias.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, HierformError>;

/// Errors emitted by the numeric core, the model, and the I/O surface.
#[derive(Debug, Error)]
pub enum HierformError {
    /// Two operands (or an operand and a parameter) have incompatible shapes.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A constructor received data whose length does not match rows*cols.
    #[error("data length {got} does not match {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        got: usize,
    },

    /// A softmax row had every column masked out.
    #[error("degenerate mask: no unmasked column left for softmax")]
    DegenerateMask,

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A scalar argument was outside its allowed range.
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    /// A stage plan could not be derived or is inconsistent with the input.
    #[error("plan error: {0}")]
    Plan(String),

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data failed validation (non-stochastic rows, bad labels, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Feature file does not start with the expected magic bytes.
    #[error("bad magic in feature file: {0}")]
    BadMagic(String),

    /// Feature file ended before the declared payload was read.
    #[error("truncated feature file: {0}")]
    Truncated(String),

    /// A file or stream could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
