use alloc::string::String;

/// Error kinds shared by every module of the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Numerically invalid input, e.g. a zero-norm embedding row.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Caller violated a shape or pairing contract.
    #[error("contract error: {0}")]
    Contract(String),
    /// Input data is inconsistent (bad labels, empty relevance sets, ...).
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
