use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("nothing to generate: {0}")]
    NoOp(String),
    #[error("training diverged at iteration {iteration}: {report}")]
    TrainingDivergence { iteration: u64, report: String },
    #[error("sampling diverged at step {step}")]
    SamplingDivergence { step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 1 for validation failures, 2 for runtime or numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_)
            | Error::Range(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::Domain(_)
            | Error::Compatibility(_)
            | Error::NoOp(_) => 1,
            Error::TrainingDivergence { .. } | Error::SamplingDivergence { .. } | Error::Io { .. } => 2,
        }
    }
}
