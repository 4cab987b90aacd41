use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing upstream artifact {}: run `{stage}` first", .path.display())]
    MissingUpstream { stage: String, path: PathBuf },

    #[error("run directory is locked by another stage ({}); remove the file if no stage is running", .0.display())]
    Locked(PathBuf),

    #[error("{0}")]
    Invalid(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] dspo_core::Error),

    #[error(transparent)]
    Annotation(#[from] dspo_annotation::AnnotationError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}
