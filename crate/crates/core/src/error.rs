//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors raised by kernels, the model, the engines and the harness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up.
    Shape(String),
    /// An argument is outside its valid domain (bad rate, label out of
    /// range, negative variance, ...).
    Domain(String),
    /// Offline training hit a non-finite loss and was aborted.
    NonFiniteLoss { epoch: usize },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::NonFiniteLoss { epoch } => {
                write!(f, "training aborted: non-finite loss at epoch {epoch}")
            }
        }
    }
}

impl core::error::Error for Error {}
