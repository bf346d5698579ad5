//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants map one-to-one onto the failure
/// contracts of the public operations.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor/primitive shape disagreement; names the operation and both shapes.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value or call sequence.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced NaN or infinity where the contract forbids it.
    #[error("numerical error in {op}: non-finite value")]
    Numerical { op: &'static str },

    /// Malformed NIfTI container (bad magic, bad header field).
    #[error("format error: {0}")]
    Format(String),

    /// NIfTI volume rank other than 3.
    #[error("unsupported rank: dim[0] = {0}, only 3 is accepted")]
    UnsupportedRank(i16),

    /// NIfTI datatype code outside the supported set (int16, float32).
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),

    /// Byte stream ends before the declared data section does.
    #[error("truncated file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },

    /// Metric has no defined value on this input (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Exact Shapley enumeration requested over too many patches.
    #[error("too many patches for exact enumeration: {count} > {max}")]
    TooManyPatches { count: usize, max: usize },

    /// Underlying I/O failure, carried as a string to keep the enum cloneable.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
