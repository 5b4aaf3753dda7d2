use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("non-finite likelihood for unit {unit}")]
    NonFiniteLikelihood { unit: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset has no {0} units")]
    EmptyArm(&'static str),

    #[error("k-means: requested {k} clusters but only {distinct} distinct points")]
    TooFewPoints { k: usize, distinct: usize },

    #[error("design matrix is rank deficient; collinear columns: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("zero variance: {0}")]
    ZeroVariance(&'static str),

    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("length mismatch for {path}: expected {expected} bytes, found {found}")]
    LengthMismatch { path: PathBuf, expected: u64, found: u64 },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("row {row}: treatment must be 0 or 1, found {value:?}")]
    NonBinaryTreatment { row: usize, value: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),

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
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected,
            got,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable numeric code used by the CLI when reporting validation failures.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::NonFinite { .. } | Error::NonFiniteLikelihood { .. } => "E_NONFINITE",
            Error::NonScalarLoss(_) => "E_LOSS",
            Error::InvalidArgument(_) => "E_ARG",
            Error::EmptyArm(_) => "E_EMPTY_ARM",
            Error::TooFewPoints { .. } => "E_KMEANS",
            Error::RankDeficient(_) => "E_RANK",
            Error::ZeroVariance(_) => "E_ZERO_VAR",
            Error::ChecksumMismatch { .. } => "E_CHECKSUM",
            Error::LengthMismatch { .. } => "E_LENGTH",
            Error::DuplicateId(_) => "E_DUP_ID",
            Error::NonBinaryTreatment { .. } => "E_TREATMENT",
            Error::Format { .. } => "E_FORMAT",
            Error::WouldOverwrite(_) => "E_OVERWRITE",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}
