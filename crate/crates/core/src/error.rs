use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("parse error in {file} row {row}: {msg}")]
    Parse { file: String, row: usize, msg: String },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("cascade iteration {iteration}: {source}")]
    Cascade {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label {label} overflows the {classes}-class output")]
    LabelOverflow { label: usize, classes: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("convergence error: {0}")]
    Convergence(String),

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid-grid",
            Error::Parse { .. } => "parse",
            Error::InvalidSample(_) => "invalid-sample",
            Error::Solver(_) => "solver",
            Error::Cascade { source, .. } => source.category(),
            Error::Shape { .. } => "shape",
            Error::LabelOverflow { .. } => "label-overflow",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Metric(_) => "metric",
            Error::Convergence(_) => "convergence",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
