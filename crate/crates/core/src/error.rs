use alloc::string::String;

/// Failure categories surfaced by the core library.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// Shapes or layer structure do not line up.
    #[error("structural error: {0}")]
    Structural(String),
    /// Malformed or empty input data.
    #[error("input error: {0}")]
    Input(String),
    /// Invalid configuration values.
    #[error("configuration error: {0}")]
    Config(String),
    /// Violation of the continual-learning protocol (overlapping labels, unseen classes).
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Operation not valid for the current session state.
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
