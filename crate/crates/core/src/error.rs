use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: fixation refers to missing word {article_id}/{sent}/{token}")]
    DanglingReference {
        path: PathBuf,
        line: usize,
        article_id: String,
        sent: usize,
        token: usize,
    },
    #[error("{path}:{line}: duplicate record for subject {subject_id} at {article_id}/{sent}/{token}")]
    DuplicateRecord {
        path: PathBuf,
        line: usize,
        subject_id: String,
        article_id: String,
        sent: usize,
        token: usize,
    },
    #[error("invalid noise spec {0:?}")]
    NoiseSpec(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("backend failure on item {item_id}: {message}")]
    Backend { item_id: String, message: String },
    #[error("rank-deficient design; dependent columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("singular GLS system")]
    Singular,
    #[error("optimizer did not converge after {iterations} iterations (last deviances: {trace:?})")]
    NoConvergence { iterations: usize, trace: Vec<f64> },
    #[error("row sets differ: {0}")]
    RowMismatch(String),
    #[error("key alignment failure: {0}")]
    Alignment(String),
    #[error("missing artifact {path}: run `{command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },
    #[error("{0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Whether the failure stems from user input (exit code 1) rather than
    /// a numerical or backend failure (exit code 2).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Backend { .. }
                | Error::Singular
                | Error::NoConvergence { .. }
                | Error::RankDeficient(_)
        )
    }
}
