use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty dictionary")]
    EmptyDictionary,

    #[error("insufficient negatives: requested {requested}, only {available} available")]
    InsufficientNegatives { requested: usize, available: usize },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate concept name `{0}`")]
    DuplicateName(String),

    #[error("empty category")]
    EmptyCategory,

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("image size {height}x{width} is not divisible by the coarsest stride {stride}")]
    Stride {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("embedding failed for concept `{concept}`: {source}")]
    ConceptEmbedding {
        concept: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}; last finite checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("npy: {0}")]
    Npy(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
