use std::path::PathBuf;

/// Errors raised anywhere in the tokenize / train / align / evaluate pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error at {stage}: {detail}")]
    Numeric { stage: &'static str, detail: String },
    #[error("training diverged at {0}")]
    Training(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("missing semantic ID for key {0:?}")]
    MissingSid(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("undefined rate: {0}")]
    UndefinedRate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
