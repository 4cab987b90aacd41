//! Annotation service: persists instance-ranking tasks and pairwise
//! evaluation trials as append-only JSONL, serves them over HTTP, and turns
//! submissions into human preference records.

pub mod error;
pub mod server;
pub mod store;

pub use error::{AnnotationError, Result};
pub use server::{router, serve, ServerConfig};
pub use store::{
    export_records, AnnotationStore, AnnotationSubmission, AnnotationTask, CandidateCrop, PairwiseChoiceRequest, PairwiseTrial, StoreConfig,
    StoreStats, SubmitAck, TaskSpec, TaskStatus,
};
