use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: expected {expected} values, found {found}")]
    Length { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-binary values where a binary mask or label was required")]
    NonBinary,
    #[error("correlation undefined for constant feature column {0}")]
    UndefinedCorrelation(usize),
    #[error("k = {k} out of range for {n} features")]
    KOutOfRange { k: usize, n: usize },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("logistic regression did not converge within {0} iterations")]
    Convergence(usize),
    #[error("degenerate fold {0}: training split lacks one of the classes")]
    DegenerateFold(usize),
    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("both classes are required")]
    SingleClass,
    #[error("missing feature {0}")]
    MissingFeature(String),
    #[error("{0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
