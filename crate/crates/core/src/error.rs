use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration.
    Config,
    /// Malformed or missing input data.
    Data,
    /// Non-finite values or numerical breakdown.
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: unknown class label {label:?}")]
    UnknownClass { line: usize, label: String },

    #[error("line {line}: polygon has {count} vertices, at least 3 required")]
    TooFewVertices { line: usize, count: usize },

    #[error("line {line}: vertex ({x}, {y}) outside [0, {limit}]")]
    OutOfBounds { line: usize, x: f64, y: f64, limit: f64 },

    #[error("duplicate tile id {0:?}")]
    DuplicateTile(String),

    #[error("tile {0:?} has annotations but no image file")]
    MissingImage(String),

    #[error("degenerate polygon: zero area")]
    DegeneratePolygon,

    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward: {0}")]
    Backward(&'static str),

    /// `phase` is `"train"` or `"validation"`.
    #[error("non-finite loss at epoch {epoch}, {phase} batch {batch}")]
    NonFiniteLoss { epoch: usize, phase: &'static str, batch: usize },

    #[error("parameter {name:?}: {msg}")]
    Parameter { name: String, msg: String },

    #[error("weight file {path}: {msg}")]
    WeightFile { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Dimensions(_) => ErrorKind::Config,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
