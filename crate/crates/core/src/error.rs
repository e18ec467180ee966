use thiserror::Error;

/// Errors raised by the numerical modules. Messages are prefixed with the
/// module that detected the problem so the CLI can surface them verbatim.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{module}: invalid parameter: {message}")]
    InvalidParameter { module: &'static str, message: String },

    #[error("{module}: window escape: {message}")]
    WindowEscape { module: &'static str, message: String },

    #[error("{module}: domain error: {message}")]
    Domain { module: &'static str, message: String },

    #[error("operator: self-adjoint operator required ({context})")]
    NotSelfAdjoint { context: String },

    #[error("{module}: operands live on different spaces")]
    SpaceMismatch { module: &'static str },

    #[error("heat: requested accuracy {requested:e} is below achievable precision {floor:e}")]
    Precision { requested: f64, floor: f64 },

    #[error("{module}: {message}")]
    Numerical { module: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(module: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter { module, message: message.into() }
    }

    pub(crate) fn escape(module: &'static str, message: impl Into<String>) -> Self {
        Error::WindowEscape { module, message: message.into() }
    }

    pub(crate) fn domain(module: &'static str, message: impl Into<String>) -> Self {
        Error::Domain { module, message: message.into() }
    }

    pub(crate) fn numerical(module: &'static str, message: impl Into<String>) -> Self {
        Error::Numerical { module, message: message.into() }
    }
}
