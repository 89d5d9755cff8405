use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation on an environment in a state that does not allow it.
    #[error("environment error: {0}")]
    Env(String),

    #[error("joint action space of size {size} exceeds the enumeration cap {cap}; use sampling instead")]
    EnumerationCap { size: u128, cap: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config file error: {0}")]
    ConfigFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
