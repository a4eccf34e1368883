use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?} but got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("{what}: truncated record at byte offset {offset}")]
    Truncated { what: &'static str, offset: usize },

    #[error("{what}: value {value} does not fit in {bits} bits (index {index})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        value: u64,
        bits: u32,
    },

    #[error("unknown raw class ids {0:?}")]
    UnknownClass(Vec<u32>),

    #[error("invalid class map: {0}")]
    ClassMap(String),

    #[error(
        "scan unfolding produced row {row} at point {point}, but only {rows} rows are configured"
    )]
    TooManyRows {
        point: usize,
        row: usize,
        rows: usize,
    },

    #[error("{what}: non-finite value encountered")]
    NonFinite { what: &'static str },

    #[error("all pixels are ignored")]
    AllIgnored,

    #[error("no feasible control parameters: no grid point with true positives reaches the PQ cutoff {cutoff:.4} (best PQ {best_pq:.4})")]
    Infeasible { best_pq: f64, cutoff: f64 },

    #[error("{what}: bad format: {message}")]
    Format { what: &'static str, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// `true` for errors caused by the data handed in (files, contents) rather
    /// than by the way the operation was configured.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Truncated { .. }
                | Error::OutOfRange { .. }
                | Error::UnknownClass(_)
                | Error::TooManyRows { .. }
                | Error::NonFinite { .. }
                | Error::AllIgnored
                | Error::Format { .. }
                | Error::Io { .. }
                | Error::Json(_)
        )
    }
}
