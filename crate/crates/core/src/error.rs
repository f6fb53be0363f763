use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point behind camera (depth {depth:e})")]
    Cheirality { depth: f64 },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("referential integrity: {0}")]
    Integrity(String),
    #[error("no takes found in {0}")]
    NoTakes(PathBuf),
    #[error("unknown image id {0}")]
    UnknownImage(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("too few correspondences: {got} < {need}")]
    TooFewCorrespondences { got: usize, need: usize },
    #[error("under-constrained problem: {0}")]
    UnderConstrained(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(file: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Self::Parse { file: file.into(), line, msg: msg.into() }
    }
}
