use alloc::string::String;

/// Errors raised anywhere in the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up. The message names the offending axes.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Input data violates a precondition (empty set, bad label, T == 0, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Malformed binary payload.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    /// Mismatched checkpoint contents.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Feature streams that cannot be aligned for early fusion.
    #[error("alignment error: {0}")]
    Alignment(String),
    /// Invalid training or experiment configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Optimisation failed (non-finite loss or gradient).
    #[error("training error: {0}")]
    Training(String),
    /// A forward pass produced a non-finite activation.
    #[error("numeric error in {layer}: non-finite activation")]
    Numeric { layer: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, data_err, dim_err};
