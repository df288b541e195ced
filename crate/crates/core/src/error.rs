use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write manifest {path}: {source}")]
    ManifestWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("export to {path} failed: {source}")]
    Export {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(String),

    #[error("backend unavailable at {endpoint}: {message}")]
    BackendUnavailable { endpoint: String, message: String },

    #[error("backend call to {endpoint} timed out after {timeout_s}s")]
    Timeout { endpoint: String, timeout_s: f64 },

    #[error("backend error from {endpoint} (status {status}, {attempts} attempt(s)): {message}")]
    Backend {
        endpoint: String,
        status: u16,
        attempts: u32,
        retryable: bool,
        message: String,
    },

    #[error("VQA backend returned an empty answer for {question:?}")]
    EmptyAnswer { question: String },

    #[error("instance {instance} is incomplete, missing views {missing:?}")]
    IncompleteInstance { instance: String, missing: Vec<usize> },

    #[error("instance {instance} view {view} is unreadable: {message}")]
    CorruptView {
        instance: String,
        view: usize,
        message: String,
    },

    #[error("training job for {expert} failed (log: {log})")]
    TrainingFailed { expert: String, log: String },

    #[error("{stage} stage failed: {source}")]
    Generation {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("appearance generation failed for views {indices:?}")]
    ViewsFailed { indices: Vec<usize> },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("metric {metric} failed: {source}")]
    Metric {
        metric: String,
        #[source]
        source: Box<Error>,
    },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn stage(stage: &str, source: Error) -> Self {
        Error::Generation {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }

    pub(crate) fn metric(metric: &str, source: Error) -> Self {
        Error::Metric {
            metric: metric.to_string(),
            source: Box::new(source),
        }
    }

    /// True when the root cause is a model backend (unreachable, timed out
    /// or returned a failure status).
    pub fn is_backend(&self) -> bool {
        match self {
            Error::BackendUnavailable { .. }
            | Error::Timeout { .. }
            | Error::Backend { .. }
            | Error::EmptyAnswer { .. }
            | Error::TrainingFailed { .. }
            | Error::ViewsFailed { .. } => true,
            Error::Generation { source, .. }
            | Error::Metric { source, .. }
            | Error::Export { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}
