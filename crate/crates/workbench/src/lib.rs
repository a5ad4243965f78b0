//! JSON-over-HTTP post-editing workbench. Segments are machine-translated
//! by the serving checkpoint, human post-edits accumulate, and an
//! adaptation job specializes the checkpoint on them between rounds.
//!
//! | method | path | body | success |
//! |---|---|---|---|
//! | POST | `/documents` | `{"source": text, "target"?: text}` | 201 `{document_id, segments}` |
//! | GET | `/segments/{id}` | | 200 segment |
//! | POST | `/segments/{id}/translate` | | 200 segment |
//! | POST | `/segments/{id}/postedit` | `{"post_edit": text}` | 200 segment |
//! | GET | `/adaptation/pending` | | 200 `{count, segment_ids}` |
//! | POST | `/adaptation/jobs` | `{"extra_epochs"?: n, "min_pairs"?: n}` | 202 job |
//! | GET | `/adaptation/jobs/{id}` | | 200 job |
//! | GET | `/status` | | 200 status |
//!
//! Errors are `{"error": message}` with 400, 404, 409 or 412.

mod service;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

pub use service::{
    AdaptationJob, JobState, Pending, Segment, SegmentStatus, Service, ServiceConfig, ServiceError, Serving, Status,
};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let code = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Precondition(_) => StatusCode::PRECONDITION_FAILED,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Core(adaptnmt_core::Error::Incompatible(_)) => StatusCode::CONFLICT,
            ServiceError::Core(_) | ServiceError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn body<T>(payload: std::result::Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ServiceError::BadRequest(e.body_text()))
}

#[derive(Deserialize)]
struct NewDocument {
    source: String,
    target: Option<String>,
}

#[derive(Deserialize)]
struct PostEdit {
    post_edit: String,
}

#[derive(Deserialize, Default)]
struct NewJob {
    extra_epochs: Option<usize>,
    min_pairs: Option<usize>,
}

type Svc = State<Arc<Service>>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Log(format!("worker panicked: {e}")))?
}

async fn create_document(
    State(svc): Svc,
    payload: std::result::Result<Json<NewDocument>, JsonRejection>,
) -> Result<impl IntoResponse, ServiceError> {
    let doc = body(payload)?;
    let (id, segments) = svc.create_document(&doc.source, doc.target.as_deref())?;
    Ok((StatusCode::CREATED, Json(json!({ "document_id": id, "segments": segments }))))
}

async fn get_segment(State(svc): Svc, Path(id): Path<u64>) -> Result<Json<Segment>, ServiceError> {
    svc.segment(id).map(Json)
}

async fn translate(State(svc): Svc, Path(id): Path<u64>) -> Result<Json<Segment>, ServiceError> {
    blocking(move || svc.translate(id)).await.map(Json)
}

async fn post_edit(
    State(svc): Svc,
    Path(id): Path<u64>,
    payload: std::result::Result<Json<PostEdit>, JsonRejection>,
) -> Result<Json<Segment>, ServiceError> {
    let edit = body(payload)?;
    svc.post_edit(id, &edit.post_edit).map(Json)
}

async fn pending(State(svc): Svc) -> Json<Pending> {
    Json(svc.pending())
}

async fn create_job(
    State(svc): Svc,
    payload: std::result::Result<Json<NewJob>, JsonRejection>,
) -> Result<impl IntoResponse, ServiceError> {
    let req = match payload {
        Err(JsonRejection::MissingJsonContentType(_)) => NewJob::default(),
        other => body(other)?,
    };
    let job = svc.start_job(req.extra_epochs.unwrap_or(1), req.min_pairs)?;
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(svc): Svc, Path(id): Path<u64>) -> Result<Json<AdaptationJob>, ServiceError> {
    svc.job(id).map(Json)
}

async fn status(State(svc): Svc) -> Json<Status> {
    Json(svc.status())
}

const PLACEHOLDER_UI: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>adaptnmt workbench</title></head>\n<body><h1>adaptnmt workbench</h1>\n<p>No UI bundle is installed. Start the service with <code>--ui-dir</code> pointing at a built bundle, or use the JSON API under <code>/documents</code>, <code>/segments</code>, <code>/adaptation</code> and <code>/status</code>.</p>\n</body></html>\n";

pub fn router(svc: Arc<Service>) -> Router {
    let limit = svc.config.max_body_bytes;
    let ui = svc.config.ui_dir.clone();
    let api = Router::new()
        .route("/documents", post(create_document))
        .route("/segments/{id}", get(get_segment))
        .route("/segments/{id}/translate", post(translate))
        .route("/segments/{id}/postedit", post(post_edit))
        .route("/adaptation/pending", get(pending))
        .route("/adaptation/jobs", post(create_job))
        .route("/adaptation/jobs/{id}", get(get_job))
        .route("/status", get(status))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(svc);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_UI) })),
    }
}

pub async fn serve(svc: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("workbench listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await
}
