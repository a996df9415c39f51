use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("incomplete prototype store: {0}")]
    IncompleteStore(String),

    #[error("incomplete run artifacts: {0}")]
    IncompleteArtifacts(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    /// A run stopped early; `partial` holds the tasks completed so far.
    #[error("run aborted at task {task}: {source}")]
    Aborted {
        task: usize,
        #[source]
        source: Box<Error>,
        partial: Box<crate::harness::RunReport>,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-parsable CLI errors and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::DegenerateVector(_) => "degenerate",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Format { .. } => "format",
            Error::Alignment(_) => "alignment",
            Error::IncompleteStore(_) => "incomplete_store",
            Error::IncompleteArtifacts(_) => "incomplete_artifacts",
            Error::Divergence { .. } => "divergence",
            Error::Aborted { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }
}
