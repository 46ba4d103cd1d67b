use thiserror::Error;

/// Error categories surfaced by the library.
///
/// The CLI maps these onto exit codes: `Config` → 2, `Shape`/`Input`/`Data`/
/// `Format`/`Io` → 3, `Numeric` → 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up (channel mismatch, odd pooling dims, ...).
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid configuration (bad kernel size, unknown strategy, ...).
    #[error("config error: {0}")]
    Config(String),
    /// Invalid runtime input (image too small, dimension mismatch, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Corpus ingestion failure (unpaired file, undecodable image, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Malformed checkpoint or other serialized artifact.
    #[error("format error: {0}")]
    Format(String),
    /// Numerical failure (NaN loss, SVD non-convergence, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
