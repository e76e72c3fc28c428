use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("duplicate node id `{0}`")]
    DuplicateId(String),

    #[error("row `{node}` has zero variance and jitter is disabled")]
    DegenerateRow { node: String },

    #[error("insufficient data: window length {window} exceeds {available} samples")]
    InsufficientData { window: usize, available: usize },

    #[error("aspect ratio N/T = {rows}/{cols} exceeds 1")]
    AspectRatio { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge: relative change {change:e} with {nodes} nodes")]
    Accuracy { change: f64, nodes: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("collinear patterns: {0:?}")]
    Collinear(Vec<String>),

    #[error("unpaired change points: {0:?}")]
    Pairing(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 input, 3 numeric/domain, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::DuplicateId(_)
            | Error::InsufficientData { .. }
            | Error::Config(_)
            | Error::Topology(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Shape(_)
            | Error::Pairing(_) => 2,
            Error::DegenerateRow { .. }
            | Error::AspectRatio { .. }
            | Error::NonFinite(_)
            | Error::Domain(_)
            | Error::Accuracy { .. }
            | Error::Numeric(_)
            | Error::Collinear(_) => 3,
            Error::Internal(_) => 4,
        }
    }
}
