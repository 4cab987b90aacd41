//! HTTP front end over [`AnnotationStore`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

use crate::error::{io_err, AnnotationError, Result};
use crate::store::{AnnotationStore, AnnotationSubmission, PairwiseChoiceRequest};

type Shared = Arc<Mutex<AnnotationStore>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    /// Static UI bundle served at `/`, if built.
    pub ui_dir: Option<PathBuf>,
}

impl IntoResponse for AnnotationError {
    fn into_response(self) -> Response {
        let status = match &self {
            AnnotationError::UnknownTask(_) | AnnotationError::UnknownTrial(_) => StatusCode::NOT_FOUND,
            AnnotationError::Invalid(_) | AnnotationError::MissingFile(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
    #[serde(default)]
    round: usize,
}

fn lock(store: &Shared) -> std::sync::MutexGuard<'_, AnnotationStore> {
    store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn next_task(State(store): State<Shared>, Query(q): Query<NextQuery>) -> Response {
    match lock(&store).next_task(&q.annotator, q.round) {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn submit(State(store): State<Shared>, Path(task_id): Path<String>, Json(sub): Json<AnnotationSubmission>) -> Response {
    if sub.task_id != task_id {
        return AnnotationError::Invalid(format!("body task_id `{}` does not match path `{task_id}`", sub.task_id)).into_response();
    }
    match lock(&store).submit(sub) {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn export(State(store): State<Shared>) -> Response {
    Json(lock(&store).export_human_records()).into_response()
}

async fn stats(State(store): State<Shared>) -> Response {
    Json(lock(&store).stats()).into_response()
}

async fn next_trial(State(store): State<Shared>, Query(q): Query<NextQuery>) -> Response {
    match lock(&store).next_trial(&q.annotator, q.round) {
        Some(trial) => Json(trial).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn choose(State(store): State<Shared>, Path(trial_id): Path<String>, Json(req): Json<PairwiseChoiceRequest>) -> Response {
    match lock(&store).record_choice(&trial_id, req) {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn pairwise_export(State(store): State<Shared>) -> Response {
    Json(lock(&store).pairwise_choices()).into_response()
}

/// Routes: the task and pairwise APIs under `/api`, crops under `/files`,
/// and the UI bundle (if any) at `/`.
pub fn router(store: AnnotationStore, ui_dir: Option<PathBuf>) -> Router {
    let files = ServeDir::new(store.files_dir());
    let shared: Shared = Arc::new(Mutex::new(store));
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/submission", post(submit))
        .route("/api/export", get(export))
        .route("/api/stats", get(stats))
        .route("/api/pairwise/next", get(next_trial))
        .route("/api/pairwise/{id}/choice", post(choose))
        .route("/api/pairwise/export", get(pairwise_export))
        .nest_service("/files", files)
        .with_state(shared);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(store: AnnotationStore, config: ServerConfig) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(config.addr).await.map_err(io_err(format!("binding {}", config.addr)))?;
    log::info!("annotation service listening on http://{}", config.addr);
    axum::serve(listener, router(store, config.ui_dir)).await.map_err(io_err("serving"))
}
