use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("category {category} is out of range for {num_categories} categories")]
    InvalidCategory { category: usize, num_categories: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("timestep {t} is outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown relation code {code} on channel {channel}")]
    UnknownRelationCode { channel: usize, code: u8 },

    #[error("non-finite values in {location}")]
    NumericalFailure { location: String },

    #[error("adapters are already merged into the base projections")]
    AlreadyMerged,

    #[error("model has no LoRA adapters attached")]
    NoAdapters,

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
