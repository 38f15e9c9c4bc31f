use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("compression failed: {0}")]
    Compression(String),
    #[error("corrupt update: {0}")]
    CorruptUpdate(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Decode(#[from] crate::dpd::wire::DecodeError),
    #[error(transparent)]
    Dataset(#[from] crate::data::prds::DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
