use std::future::Future;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use super::{AnnotationRequest, DecisionRequest, SampleRecord, ServiceError, Store};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::DuplicateId(_)
            | ServiceError::InvalidState { .. }
            | ServiceError::LeaseViolation { .. } => StatusCode::CONFLICT,
            ServiceError::InvalidCue { .. }
            | ServiceError::TraceInvalid { .. }
            | ServiceError::MissingHumanCue { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Schema { .. } => StatusCode::BAD_REQUEST,
            ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.code(), "message": self.to_string() });
        if let ServiceError::InvalidCue { report, .. } | ServiceError::TraceInvalid { report, .. } =
            &self
        {
            body["violations"] = serde_json::to_value(&report.violations).unwrap_or_default();
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ServiceError>;

#[derive(Deserialize)]
struct NextQuery {
    reviewer: String,
}

async fn next(
    State(store): State<Arc<Store>>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ServiceError> {
    Ok(match store.next_for_review(&q.reviewer)? {
        Some(rec) => Json(rec).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn annotation(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Json(req): Json<AnnotationRequest>,
) -> ApiResult<SampleRecord> {
    store
        .submit_annotation(&id, &req.reviewer_id, req.cues)
        .map(Json)
}

async fn decision(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<SampleRecord> {
    store.decide(&id, &req).map(Json)
}

async fn sample(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
) -> ApiResult<SampleRecord> {
    store.get(&id).map(Json).ok_or(ServiceError::NotFound(id))
}

async fn enqueue(
    State(store): State<Arc<Store>>,
    Json(samples): Json<Vec<SampleRecord>>,
) -> Result<Response, ServiceError> {
    let report = store.enqueue(samples)?;
    Ok((StatusCode::CREATED, Json(report)).into_response())
}

async fn stats(State(store): State<Arc<Store>>) -> Json<super::ServiceStats> {
    Json(store.stats())
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/stats", get(stats))
        .route("/api/queue/next", get(next))
        .route("/api/samples", post(enqueue))
        .route("/api/samples/{id}", get(sample))
        .route("/api/samples/{id}/annotation", post(annotation))
        .route("/api/samples/{id}/decision", post(decision))
        .with_state(store)
}

/// Serve until `shutdown` resolves, then compact the journal.
pub async fn serve(
    listener: TcpListener,
    store: Arc<Store>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(store.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    store.compact()
}
