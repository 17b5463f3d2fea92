use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("tape already consumed by a reverse pass; reset it before reuse")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("missing parameter group {0}")]
    MissingGroup(String),

    #[error("missing head {0} in checkpoint")]
    MissingHead(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("loss composition for {method} at stage {stage}: {detail}")]
    LossParts { method: String, stage: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dataset format: {0}")]
    Format(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("stage {stage} failed: {source}")]
    StageFailed {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} trials failed; see {}", manifest.display())]
    TrialsFailed { failed: usize, total: usize, manifest: PathBuf },

    #[error("selfcheck failed: {0}")]
    SelfcheckFailed(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
