//! HTTP/JSON API for the review UI and reporting.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::{Backend, HealthReport, Health};
use crate::store::{ReviewAction, SightingFilter, Store, StoreError};

const DEFAULT_LIMIT: usize = 50;
const MAX_LIMIT: usize = 500;

#[derive(Clone)]
pub struct ApiState {
    pub store: Arc<Store>,
    pub backend: Arc<dyn Backend>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct HealthBody {
    pub status: &'static str,
    pub backend_health: HealthReport,
    pub queue_depth: usize,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Validation(_) | StoreError::BadCursor => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/labels", get(labels))
        .route("/api/review/pending", get(pending))
        .route("/api/review/{id}", post(review))
        .route("/api/sightings", get(sightings))
        .route("/api/summary/daily", get(daily))
        .route("/api/crops/{crop_ref}", get(crop_image))
        .route("/ui", get(ui_index))
        .route("/ui/", get(ui_index))
        .route("/ui/{*path}", get(ui_file))
        .with_state(state)
}

async fn health(State(st): State<ApiState>) -> Json<HealthBody> {
    let backend = st.backend.clone();
    let report = tokio::task::spawn_blocking(move || backend.health_check())
        .await
        .unwrap_or_else(|e| HealthReport::down(e.to_string()));
    let status = if report.health == Health::Ok { "ok" } else { "degraded" };
    Json(HealthBody {
        status,
        backend_health: report,
        queue_depth: st.store.queue_depth(),
    })
}

async fn labels(State(st): State<ApiState>) -> Json<Vec<String>> {
    Json(st.store.policy().labels.clone())
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    limit: Option<usize>,
    cursor: Option<String>,
}

fn limit(l: Option<usize>) -> Result<usize, ApiError> {
    match l.unwrap_or(DEFAULT_LIMIT) {
        0 => Err(bad_request("limit must be at least 1")),
        n => Ok(n.min(MAX_LIMIT)),
    }
}

async fn pending(State(st): State<ApiState>, Query(q): Query<PageQuery>) -> Result<Response, ApiError> {
    let page = st.store.pending_reviews(limit(q.limit)?, q.cursor.as_deref())?;
    Ok(Json(page).into_response())
}

async fn review(
    State(st): State<ApiState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ReviewAction>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(action) = body.map_err(|e| bad_request(e.body_text()))?;
    let store = st.store.clone();
    let (item, _) = tokio::task::spawn_blocking(move || store.submit_review(&id, action))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(item).into_response())
}

/// RFC 3339 instant, or a bare date meaning that day's midnight UTC.
fn parse_instant(key: &str, raw: &str, end_of_day: bool) -> Result<DateTime<Utc>, ApiError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Ok(t.with_timezone(&Utc));
    }
    let d = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map_err(|_| bad_request(format!("`{key}` must be an RFC 3339 timestamp or YYYY-MM-DD")))?;
    let d = if end_of_day { d.succ_opt().unwrap_or(d) } else { d };
    Ok(d.and_hms_opt(0, 0, 0).unwrap().and_utc())
}

#[derive(Debug, Deserialize)]
pub struct SightingQuery {
    from: Option<String>,
    to: Option<String>,
    species: Option<String>,
    camera: Option<String>,
    limit: Option<usize>,
    cursor: Option<String>,
}

async fn sightings(State(st): State<ApiState>, Query(q): Query<SightingQuery>) -> Result<Response, ApiError> {
    let filter = SightingFilter {
        from: q.from.as_deref().map(|v| parse_instant("from", v, false)).transpose()?,
        to: q.to.as_deref().map(|v| parse_instant("to", v, true)).transpose()?,
        species: q.species,
        camera: q.camera,
    };
    let page = st.store.list_sightings(&filter, limit(q.limit)?, q.cursor.as_deref())?;
    Ok(Json(page).into_response())
}

#[derive(Debug, Deserialize)]
pub struct RangeQuery {
    from: Option<String>,
    to: Option<String>,
}

async fn daily(State(st): State<ApiState>, Query(q): Query<RangeQuery>) -> Result<Response, ApiError> {
    let from = q.from.as_deref().map(|v| parse_instant("from", v, false)).transpose()?;
    let to = q.to.as_deref().map(|v| parse_instant("to", v, true)).transpose()?;
    Ok(Json(st.store.daily_summary(from, to)?).into_response())
}

async fn crop_image(State(st): State<ApiState>, UrlPath(crop_ref): UrlPath<String>) -> Result<Response, ApiError> {
    let crop_ref = crop_ref.strip_suffix(".png").unwrap_or(&crop_ref);
    let path = st
        .store
        .crop_path(crop_ref)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no crop `{crop_ref}`")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        _ => "application/octet-stream",
    }
}

async fn serve_ui(st: &ApiState, rel: &str) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, "not found".into());
    let root = st.ui_dir.as_ref().ok_or_else(not_found)?;
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(not_found());
    }
    let mut path = root.join(rel);
    if path.is_dir() {
        path = path.join("index.html");
    }
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

async fn ui_index(State(st): State<ApiState>) -> Result<Response, ApiError> {
    serve_ui(&st, "index.html").await
}

async fn ui_file(State(st): State<ApiState>, UrlPath(path): UrlPath<String>) -> Result<Response, ApiError> {
    serve_ui(&st, &path).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instants() {
        let t = parse_instant("from", "2026-05-02T10:00:00+02:00", false).unwrap();
        assert_eq!(t.to_rfc3339(), "2026-05-02T08:00:00+00:00");
        let d = parse_instant("to", "2026-05-02", true).unwrap();
        assert_eq!(d.to_rfc3339(), "2026-05-03T00:00:00+00:00");
        assert!(parse_instant("from", "yesterday", false).is_err());
    }

    #[test]
    fn content_types() {
        assert_eq!(content_type(Path::new("a/index.html")), "text/html; charset=utf-8");
        assert_eq!(content_type(Path::new("x.bin")), "application/octet-stream");
    }
}
