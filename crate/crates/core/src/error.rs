use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

pub(crate) fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

pub(crate) fn non_negative(x: f64) -> bool {
    x >= 0.0 && x.is_finite()
}
