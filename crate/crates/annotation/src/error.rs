use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown trial `{0}`")]
    UnknownTrial(String),

    #[error("invalid submission: {0}")]
    Invalid(String),

    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] dspo_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AnnotationError> = std::result::Result<T, E>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> AnnotationError {
    let context = context.into();
    move |source| AnnotationError::Io { context, source }
}
