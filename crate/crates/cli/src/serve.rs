//! Annotation HTTP API.
//!
//! | method | path                          | body / reply                      |
//! |--------|-------------------------------|-----------------------------------|
//! | GET    | `/pairs/next?session=…`       | `PairView`, or 204 when finished  |
//! | GET    | `/pairs/{id}`                 | `PairView`                        |
//! | GET    | `/pairs/{id}/images/{side}`   | image bytes, side `left`/`right`  |
//! | POST   | `/pairs/{id}/annotations`     | `Submission` → 201 `Receipt`      |
//! | GET    | `/export`                     | NDJSON of `AnnotationRecord`      |
//!
//! Errors are `{"error": <code>, "message": <text>}`. Submissions are
//! serialized through one lock, so a pair never gets a third annotator.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cap_eval::annotation::{AnnotationError, AnnotationStore, PairView, Submission};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use crate::commands::image_mime;

pub type SharedStore = Arc<Mutex<AnnotationStore>>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let (status, code) = match &e {
            AnnotationError::UnknownPair(_) => (StatusCode::NOT_FOUND, "unknown_pair"),
            AnnotationError::Duplicate { .. } => (StatusCode::CONFLICT, "already_submitted"),
            AnnotationError::PairFull(_) => (StatusCode::CONFLICT, "pair_full"),
            AnnotationError::QuotaExceeded(_) => (StatusCode::CONFLICT, "quota_exceeded"),
            AnnotationError::Incomplete(_) => (StatusCode::UNPROCESSABLE_ENTITY, "incomplete"),
            AnnotationError::EmptySession => (StatusCode::UNPROCESSABLE_ENTITY, "missing_session"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct SessionQuery {
    #[serde(default)]
    pub session: Option<String>,
}

async fn next_pair(State(store): State<SharedStore>, Query(q): Query<SessionQuery>) -> Result<Response, ApiError> {
    let session = q.session.unwrap_or_default();
    if session.trim().is_empty() {
        return Err(AnnotationError::EmptySession.into());
    }
    let store = store.lock().await;
    Ok(match store.next_for(&session) {
        Some(pair) => Json(PairView::of(pair, Some(store.progress(&session)))).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn get_pair(
    State(store): State<SharedStore>,
    Path(id): Path<String>,
    Query(q): Query<SessionQuery>,
) -> Result<Json<PairView>, ApiError> {
    let store = store.lock().await;
    let pair = store.pair(&id).ok_or_else(|| AnnotationError::UnknownPair(id.clone()))?;
    let progress = q.session.filter(|s| !s.trim().is_empty()).map(|s| store.progress(&s));
    Ok(Json(PairView::of(pair, progress)))
}

async fn pair_image(State(store): State<SharedStore>, Path((id, side)): Path<(String, String)>) -> Result<Response, ApiError> {
    let image = {
        let store = store.lock().await;
        let pair = store.pair(&id).ok_or_else(|| AnnotationError::UnknownPair(id.clone()))?;
        match side.as_str() {
            "left" => pair.left.clone(),
            "right" => pair.right.clone(),
            _ => return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_side", format!("no side {side:?}"))),
        }
    };
    let bytes = tokio::task::spawn_blocking(move || image.read_bytes())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "image_unavailable", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, image_mime(&bytes))], bytes).into_response())
}

async fn submit(
    State(store): State<SharedStore>,
    Path(id): Path<String>,
    Json(sub): Json<Submission>,
) -> Result<Response, ApiError> {
    let receipt = store.lock().await.submit(&id, &sub)?;
    Ok((StatusCode::CREATED, Json(receipt)).into_response())
}

async fn export(State(store): State<SharedStore>) -> Response {
    let store = store.lock().await;
    let mut body = String::new();
    for r in store.export() {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

pub fn router(store: SharedStore, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/pairs/next", get(next_pair))
        .route("/pairs/{id}", get(get_pair))
        .route("/pairs/{id}/images/{side}", get(pair_image))
        .route("/pairs/{id}/annotations", post(submit))
        .route("/export", get(export))
        .with_state(store);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until ctrl-c.
pub async fn run(store: AnnotationStore, addr: SocketAddr, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let app = router(Arc::new(Mutex::new(store)), static_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "annotation API listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
