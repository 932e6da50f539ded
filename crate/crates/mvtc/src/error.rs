use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("ingestion error at record {record}: {msg}")]
    Ingest { record: usize, msg: String },

    #[error("malformed csv {path}:{line}: {msg}")]
    Csv {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("solver diverged at iteration {iter}: {msg}")]
    Divergence { iter: usize, msg: String },

    #[error("stream error: {0}")]
    Stream(String),

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
