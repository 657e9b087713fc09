use thiserror::Error;

/// Errors raised by kernels, layers and the conversion pipeline.
#[derive(Debug, Error)]
pub enum LpaError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing tensor `{0}` in parameter store")]
    MissingTensor(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LpaError>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::LpaError::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
