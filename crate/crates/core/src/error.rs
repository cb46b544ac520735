use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error in {context}: {message}")]
    Csv { context: String, message: String },
    #[error("invalid stack {stack_id}: {reason}")]
    InvalidStack { stack_id: String, reason: String },
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed PGM {path}: {reason}")]
    Pgm { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pseudo-label cache has no score for {stack_id}[{slice_index}]")]
    CacheMiss { stack_id: String, slice_index: usize },
    #[error("training selection is empty")]
    EmptySelection,
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("statistics undefined: {0}")]
    Statistics(String),
    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("runs are not comparable: {0}")]
    Incomparable(String),
    #[error("model is frozen")]
    Frozen,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}

pub(crate) trait JsonContext<T> {
    fn json_ctx(self, context: impl Into<String>) -> Result<T>;
}

impl<T> JsonContext<T> for serde_json::Result<T> {
    fn json_ctx(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|source| Error::Json { context: context.into(), source })
    }
}
