use std::path::PathBuf;

/// Errors raised by every stage of the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Inputs that are well-formed but numerically degenerate
    /// (zero vectors, coincident point clouds, singular systems).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("wrong colorspace: expected {expected}, found {found}")]
    ColorSpace {
        expected: &'static str,
        found: &'static str,
    },

    #[error("backward already ran on this tape; record a new graph")]
    BackwardConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    #[error("malformed feature file: {0}")]
    FeatureFormat(String),

    #[error("malformed {kind} document: {message}")]
    Document { kind: &'static str, message: String },

    #[error("cancelled")]
    Cancelled,

    #[error("image codec error for {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
