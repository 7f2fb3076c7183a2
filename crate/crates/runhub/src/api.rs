//! JSON API under `/api` consumed by the browser UI.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::config::{RunConfig, Stage};
use crate::hub::{Hub, UploadKind};
use crate::HubError;

pub const CONFIG_HASH_HEADER: &str = "x-abin-config-hash";
const UPLOAD_LIMIT: usize = 1 << 30;

pub struct ApiError(pub HubError);

impl From<HubError> for ApiError {
    fn from(e: HubError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &HubError) -> StatusCode {
    match e {
        HubError::InvalidConfig(_) | HubError::BadRequest(_) => StatusCode::BAD_REQUEST,
        HubError::NotFound(_) => StatusCode::NOT_FOUND,
        HubError::DependencyNotMet { .. } | HubError::StageBusy(_) => StatusCode::CONFLICT,
        HubError::StageFailed { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        HubError::StorageUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "code": self.0.code(),
            "message": self.0.to_string(),
            "detail": self.0.detail(),
        });
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<Hub>>;

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/api/runs", post(create_run).get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route(
            "/api/runs/{id}/upload",
            post(upload).layer(DefaultBodyLimit::max(UPLOAD_LIMIT)),
        )
        .route("/api/runs/{id}/stages/{stage}", post(run_stage))
        .route("/api/runs/{id}/jobs/{stage}", get(job_status))
        .route("/api/runs/{id}/jobs/{stage}/cancel", post(cancel_job))
        .route("/api/runs/{id}/artifacts/{name}", get(artifact))
        .route("/api/reset", post(reset))
        .with_state(hub)
}

pub async fn serve(hub: Arc<Hub>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(hub)).await
}

/// Empty bodies are allowed wherever the JSON body is optional.
fn optional_json<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError(HubError::BadRequest(format!("malformed JSON: {e}"))))
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateRun {
    config: RunConfig,
    /// Present means deterministic.
    seed: Option<u64>,
}

async fn create_run(State(hub): Shared, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateRun = optional_json(&body)?;
    let rec = hub.create_run(req.config, req.seed)?;
    let hash = rec.config_hash();
    Ok((StatusCode::CREATED, Json(json!({ "run": rec, "config_hash": hash }))))
}

async fn list_runs(State(hub): Shared) -> ApiResult<impl IntoResponse> {
    let runs: Vec<_> = hub
        .list_runs()?
        .into_iter()
        .map(|r| json!({ "run_id": r.run_id, "created_at": r.created_at, "status": r.status }))
        .collect();
    Ok(Json(json!({ "runs": runs })))
}

async fn get_run(State(hub): Shared, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let rec = hub.get_run(&id)?;
    let hash = rec.config_hash();
    Ok(Json(json!({ "run": rec, "config_hash": hash })))
}

#[derive(Deserialize)]
struct UploadQuery {
    kind: String,
    filename: String,
}

async fn upload(
    State(hub): Shared,
    Path(id): Path<String>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let kind: UploadKind = q.kind.parse()?;
    let rec = tokio::task::spawn_blocking(move || hub.upload(&id, kind, &q.filename, &body))
        .await
        .map_err(|e| ApiError(HubError::StorageUnavailable(e.to_string())))??;
    let hash = rec.config_hash();
    Ok(Json(json!({ "run": rec, "config_hash": hash })))
}

async fn run_stage(
    State(hub): Shared,
    Path((id, stage)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let stage: Stage = stage.parse()?;
    let patch: serde_json::Value = optional_json(&body)?;
    hub.update_config(&id, stage, &patch)?;
    hub.execute_stage(&id, stage)?;
    Ok((StatusCode::ACCEPTED, Json(hub.job_status(&id, stage)?)))
}

async fn job_status(State(hub): Shared, Path((id, stage)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    let stage: Stage = stage.parse()?;
    Ok(Json(hub.job_status(&id, stage)?))
}

async fn cancel_job(State(hub): Shared, Path((id, stage)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    let stage: Stage = stage.parse()?;
    hub.cancel(&id, stage)?;
    Ok((StatusCode::ACCEPTED, Json(hub.job_status(&id, stage)?)))
}

fn content_type(name: &str) -> &'static str {
    match name.rsplit('.').next() {
        Some("json") => "application/json",
        Some("csv") => "text/csv; charset=utf-8",
        Some("svg") => "image/svg+xml",
        _ => "text/plain; charset=utf-8",
    }
}

async fn artifact(State(hub): Shared, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let (path, hash) = hub.artifact(&id, &name)?;
    let bytes = std::fs::read(&path).map_err(|e| ApiError(HubError::StorageUnavailable(format!("{name}: {e}"))))?;
    let mut resp = (StatusCode::OK, bytes).into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type(&name)));
    if let Ok(v) = HeaderValue::from_str(&hash) {
        headers.insert(CONFIG_HASH_HEADER, v);
    }
    Ok(resp)
}

#[derive(Deserialize)]
struct ResetQuery {
    #[serde(default)]
    purge: bool,
}

async fn reset(State(hub): Shared, Query(q): Query<ResetQuery>) -> ApiResult<impl IntoResponse> {
    tokio::task::spawn_blocking(move || hub.reset(q.purge))
        .await
        .map_err(|e| ApiError(HubError::StorageUnavailable(e.to_string())))??;
    Ok(Json(json!({ "reset": true, "purged": q.purge })))
}
