use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// Every variant maps onto a stable machine-readable code (see [`Error::code`])
/// which the command-line front end prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{0}: non-finite value")]
    NonFinite(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },

    #[error("attention trace lacks pre-activations")]
    MissingPreactivations,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short upper-case code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "SHAPE",
            Error::NonFinite(_) => "NON_FINITE",
            Error::NonScalarOutput(_) => "NON_SCALAR",
            Error::UnknownParameter(_) => "UNKNOWN_PARAM",
            Error::Empty(_) => "EMPTY",
            Error::InvalidArgument(_) => "INVALID_ARG",
            Error::Parse { .. } => "PARSE",
            Error::Config(_) => "CONFIG",
            Error::Divergence { .. } => "DIVERGENCE",
            Error::MissingPreactivations => "MISSING_PREACT",
            Error::Checkpoint(_) => "CHECKPOINT",
            Error::Io { .. } => "IO",
            Error::Json(_) => "JSON",
            Error::Csv(_) => "CSV",
        }
    }

    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
