use std::path::PathBuf;

use thiserror::Error;

use crate::container::CompatReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("size error: {0}")]
    Size(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("incompatible checkpoints: {}", .0.summary())]
    Incompatible(CompatReport),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("at lambda = {lambda}: {source}")]
    AtLambda {
        lambda: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("scenario {scenario} failed for seed {seed}: {source}")]
    Scenario {
        scenario: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable category name, used as the error tag on the command line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Size(_) => "size",
            Error::Validation(_) => "validation",
            Error::Incompatible(_) => "incompatible",
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Divergence { .. } => "divergence",
            Error::AtLambda { source, .. } | Error::Scenario { source, .. } => source.kind(),
            Error::Json(_) => "json",
        }
    }

    /// True for failures caused by the tool itself rather than by its inputs.
    pub fn is_internal(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::AtLambda { source, .. } | Error::Scenario { source, .. } => source.is_internal(),
            _ => false,
        }
    }
}
