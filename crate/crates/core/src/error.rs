use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// Each variant maps onto one machine-readable class (see [`Error::class`]),
/// which the command-line front end prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("coordinate domain violation: {0}")]
    Domain(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier for the error kind.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "invalid-shape",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::NonFinite { .. } => "non-finite",
            Error::OracleInvalid(_) => "oracle-invalid",
            Error::Invariant(_) => "invariant",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
