use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("dataset structure error: {0}")]
    DatasetStructure(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("split leakage: {0}")]
    SplitLeakage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn rejected(msg: impl Into<String>) -> Error {
    Error::RejectedInput(msg.into())
}
