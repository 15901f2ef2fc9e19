use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Parse failure in the architecture notation, with the byte offset it was detected at.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    pub(crate) fn new(offset: usize, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("log of negative value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite weight {value} at index {index}")]
    NonFiniteWeight { index: usize, value: f64 },

    #[error("exponent overflow in layer `{layer}` at coordinate {coord}: max-plus value {value}")]
    Overflow {
        layer: String,
        coord: usize,
        value: f64,
    },

    #[error("layer `{layer}` saturated {saturated} of {total} max-plus outputs")]
    Saturation {
        layer: String,
        saturated: usize,
        total: usize,
    },

    #[error("k-factor is undefined when every product is zero")]
    ZeroProducts,

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("layer `{0}` not found")]
    LayerNotFound(String),

    #[error("layer `{0}` is not convertible")]
    NotConvertible(String),

    #[error("layer `{0}` has no parameters")]
    MissingParams(String),

    #[error("in layer `{layer}`: {source}")]
    InLayer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("model file error at offset {offset}: {message}")]
    ModelFile { offset: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("cannot evaluate on an empty split")]
    EmptySplit,
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            e @ Error::InLayer { .. } => e,
            e => Error::InLayer {
                layer: layer.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InLayer { source, .. } => source.category(),
            Error::Overflow { .. }
            | Error::Saturation { .. }
            | Error::Divergence { .. }
            | Error::LogDomain { .. }
            | Error::ZeroProducts => ErrorCategory::Numeric,
            Error::Format { .. }
            | Error::ModelFile { .. }
            | Error::Io { .. }
            | Error::EmptySplit
            | Error::NonFiniteWeight { .. } => ErrorCategory::Data,
            Error::Shape { .. }
            | Error::NonScalarLoss(_)
            | Error::Parse(_)
            | Error::LayerNotFound(_)
            | Error::NotConvertible(_)
            | Error::MissingParams(_)
            | Error::Invalid(_) => ErrorCategory::Usage,
        }
    }
}
