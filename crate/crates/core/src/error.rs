use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload while reading {0}")]
    Truncated(String),

    #[error("trailing bytes after the declared payload")]
    TrailingBytes,

    #[error("non-finite value in record {record}, coordinate {coord}")]
    NonFinite { record: usize, coord: usize },

    #[error("label id {label_id} in record {record} is out of range ({labels} labels)")]
    LabelOutOfRange {
        record: usize,
        label_id: u32,
        labels: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown label: {0}")]
    UnknownLabel(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("degenerate (zero-norm) vector at row {row}")]
    DegenerateVector { row: usize },

    #[error("batch is not l2-normalized (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("no anchor in the batch has a positive pair")]
    NoPositivePairs,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("class {class} has {available} records, batch composition needs {required}")]
    Composition {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("degenerate projection: data has fewer than two nonzero principal directions")]
    DegenerateProjection,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    /// Stable machine-readable category, used as the CLI's error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated(_) => "truncated",
            Error::TrailingBytes => "trailing_bytes",
            Error::NonFinite { .. } => "non_finite",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Validation(_) => "validation",
            Error::UnknownLabel(_) => "unknown_label",
            Error::Dimension { .. } => "dimension",
            Error::DegenerateVector { .. } => "degenerate_vector",
            Error::NotNormalized { .. } => "not_normalized",
            Error::NoPositivePairs => "no_positive_pairs",
            Error::Config(_) => "config",
            Error::Composition { .. } => "composition",
            Error::Divergence { .. } => "divergence",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::DegenerateProjection => "degenerate_projection",
            Error::Parse { .. } => "parse",
            Error::Json(_) => "json",
            Error::Internal(_) => "internal",
        }
    }
}
