//! The `dspo` command-line pipeline: configuration, run directories with
//! per-stage manifests, and the stages themselves.

pub mod cli;
pub mod config;
pub mod error;
pub mod run;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use run::{RunDir, StageManifest, StageOutcome};
pub use stages::Pipeline;
