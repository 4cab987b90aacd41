use std::path::PathBuf;

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image {width}x{height} is smaller than the requested {size}x{size} crop")]
    ImageTooSmall { width: usize, height: usize, size: usize },

    #[error("no usable images found in {0}")]
    EmptyDataset(PathBuf),

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("model parameters are not finite ({0})")]
    NonFiniteParams(String),

    #[error("masks do not form a partition: {0}")]
    NotAPartition(String),

    #[error("segmenter `{name}` failed: {reason}")]
    Segmenter { name: String, reason: String },

    #[error("captioner `{name}` failed: {reason}")]
    Captioner { name: String, reason: String },

    #[error("all {0} candidates scored equally: no preference")]
    NoPreference(usize),

    #[error("duplicate generation setting label `{0}`")]
    DuplicateSetting(String),

    #[error("record carries negative prompt {0:?} but the predictions were computed without it")]
    MissingNegativePrompt(String),

    #[error("{path}: line {line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },

    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error("win rate undefined: all {0} trials tied")]
    AllTies(usize),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io { context: context(), source })
    }
}
