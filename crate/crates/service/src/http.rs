//! JSON HTTP API.

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crfix_core::classify::ReviewComment;
use crfix_core::funnel::TimeWindow;
use crfix_core::patch::SourceFile;
use serde::Deserialize;
use serde_json::json;

use crate::service::{Service, ServiceError, UserAction};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::InvalidComment(_) | ServiceError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::IllegalTransition(_) | ServiceError::InProgress(_) => StatusCode::CONFLICT,
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({"error": self.code(), "message": self.to_string()});
        (status, Json(body)).into_response()
    }
}

fn bad_json(rejection: JsonRejection) -> ServiceError {
    ServiceError::InvalidRequest(rejection.body_text())
}

#[derive(Debug, Deserialize)]
struct FileBody {
    path: String,
    content: String,
}

#[derive(Debug, Deserialize)]
struct CommentBody {
    id: String,
    diff_id: String,
    file_path: String,
    comment_text: String,
    line_start: usize,
    line_end: usize,
    #[serde(default)]
    author: String,
    #[serde(default)]
    created_at: i64,
    file: FileBody,
}

#[derive(Debug, Deserialize)]
struct DiffQuery {
    diff_id: String,
}

#[derive(Debug, Deserialize)]
struct WindowQuery {
    from: Option<i64>,
    to: Option<i64>,
}

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/v1/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/v1/comments", post(post_comment))
        .route("/v1/comments/{id}", get(get_comment))
        .route("/v1/suggestions", get(list_suggestions))
        .route("/v1/suggestions/{id}", get(get_suggestion))
        .route("/v1/suggestions/{id}/{action}", post(act))
        .route("/v1/diffs/{diff_id}/commits", post(post_commit))
        .route("/v1/metrics/funnel", get(funnel))
        .with_state(service)
}

async fn post_comment(
    State(svc): State<Service>,
    body: Result<Json<CommentBody>, JsonRejection>,
) -> Result<Response, ServiceError> {
    let Json(b) = body.map_err(bad_json)?;
    let file = SourceFile::from_content(b.file.path, &b.file.content)
        .map_err(|e| ServiceError::InvalidComment(e.to_string()))?;
    let comment = ReviewComment {
        id: b.id,
        diff_id: b.diff_id,
        file_path: b.file_path,
        comment_text: b.comment_text,
        line_start: b.line_start,
        line_end: b.line_end,
        author: b.author,
        created_at: b.created_at,
    };
    let status = svc.ingest_comment(comment, file)?;
    Ok((StatusCode::ACCEPTED, Json(json!({"comment_id": status.comment_id}))).into_response())
}

async fn get_comment(State(svc): State<Service>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.comment_status(&id)?).into_response())
}

async fn list_suggestions(
    State(svc): State<Service>,
    query: Result<Query<DiffQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(q) = query.map_err(|e| ServiceError::InvalidRequest(e.body_text()))?;
    Ok(Json(svc.suggestions_for_diff(&q.diff_id)).into_response())
}

async fn get_suggestion(State(svc): State<Service>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.suggestion(&id)?).into_response())
}

async fn act(
    State(svc): State<Service>,
    Path((id, action)): Path<(String, String)>,
) -> Result<Response, ServiceError> {
    let action = match action.as_str() {
        "accept" => UserAction::Accept,
        "discard" => UserAction::Discard,
        "approve" => UserAction::Approve,
        "disapprove" => UserAction::Disapprove,
        other => return Err(ServiceError::NotFound(format!("action {other}"))),
    };
    Ok(Json(svc.act_on_suggestion(&id, action)?).into_response())
}

async fn post_commit(
    State(svc): State<Service>,
    Path(diff_id): Path<String>,
    body: Result<Json<FileBody>, JsonRejection>,
) -> Result<Response, ServiceError> {
    let Json(b) = body.map_err(bad_json)?;
    let file = SourceFile::from_content(b.path, &b.content).map_err(|e| ServiceError::InvalidRequest(e.to_string()))?;
    Ok(Json(svc.record_commit(&diff_id, &file)?).into_response())
}

async fn funnel(
    State(svc): State<Service>,
    query: Result<Query<WindowQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(q) = query.map_err(|e| ServiceError::InvalidRequest(e.body_text()))?;
    let window = TimeWindow::new(q.from.unwrap_or(i64::MIN), q.to.unwrap_or(i64::MAX));
    if window.from > window.to {
        return Err(ServiceError::InvalidRequest("from is after to".into()));
    }
    Ok(Json(svc.query_funnel(window)).into_response())
}
