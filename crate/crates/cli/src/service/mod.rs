//! HTTP job service.
//!
//! | method | path                              | response                      |
//! |--------|-----------------------------------|-------------------------------|
//! | GET    | `/health`                         | `{"status": "ok"}`            |
//! | POST   | `/jobs`                           | 201, [`JobEnvelope`]          |
//! | GET    | `/jobs`                           | `{"jobs": [JobEnvelope]}`     |
//! | GET    | `/jobs/{id}`                      | [`JobEnvelope`]               |
//! | GET    | `/jobs/{id}/trajectory`           | [`TrajectoryPage`]            |
//! | GET    | `/jobs/{id}/preview/{k}`          | PNG                           |
//! | GET    | `/jobs/{id}/result`               | [`ResultSummary`]             |
//! | GET    | `/jobs/{id}/result/image`         | PNG                           |
//! | GET    | `/jobs/{id}/image`, `/mask`       | PNG                           |
//! | POST   | `/jobs/{id}/cancel`               | 202, [`JobEnvelope`]          |
//!
//! Errors are `{"error": {"code": ..., "message": ...}}` with the codes of
//! [`ErrorCode`].

pub mod jobs;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use clipdrag::image_io::{Image, Mask};
use clipdrag::pipeline::{BackendSpec, EncoderSpec, Hyperparams, JobSpec, TrajectoryRecord};
use log::info;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

use crate::bundle::{self, ResultSummary};
pub use jobs::{JobEnvelope, JobHandle, JobStatus, Registry};

pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;
pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    BadRequest,
    InvalidSpec,
    NotReady,
    Conflict,
    Internal,
}

impl ErrorCode {
    fn status(self) -> StatusCode {
        match self {
            Self::NotFound => StatusCode::NOT_FOUND,
            Self::BadRequest => StatusCode::BAD_REQUEST,
            Self::InvalidSpec => StatusCode::UNPROCESSABLE_ENTITY,
            Self::NotReady | Self::Conflict => StatusCode::CONFLICT,
            Self::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub error: ErrorBody,
}

#[derive(Debug)]
pub struct ApiError(pub ErrorCode, pub String);

impl ApiError {
    fn not_found(what: impl std::fmt::Display) -> Self {
        Self(ErrorCode::NotFound, format!("{what} not found"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let payload = ErrorPayload {
            error: ErrorBody {
                code: self.0,
                message: self.1,
            },
        };
        (self.0.status(), Json(payload)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Body of `POST /jobs`. Images are base64-encoded PNG; pairs are
/// `[hx, hy, tx, ty]` in image pixels.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub image_png: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png: Option<String>,
    pub prompt_original: String,
    #[serde(default)]
    pub prompt_edit: String,
    pub pairs: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<Hyperparams>,
    /// Falls back to the service's backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPage {
    pub job_id: String,
    pub total: usize,
    pub offset: usize,
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobList {
    pub jobs: Vec<JobEnvelope>,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// One subdirectory per job is created here.
    pub root: PathBuf,
    pub workers: usize,
    pub backend: BackendSpec,
}

pub struct AppState {
    config: ServiceConfig,
    registry: Registry,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> clipdrag::Result<Arc<Self>> {
        let registry = Registry::load(&config.root)?;
        let workers = Arc::new(Semaphore::new(config.workers.max(1)));
        Ok(Arc::new(Self {
            config,
            registry,
            workers,
        }))
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn job(&self, id: &str) -> ApiResult<Arc<JobHandle>> {
        self.registry.get(id).ok_or_else(|| ApiError::not_found(format!("job {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/health", get(health))
        .route("/jobs", post(submit).get(list))
        .route("/jobs/{id}", get(status))
        .route("/jobs/{id}/trajectory", get(trajectory))
        .route("/jobs/{id}/preview/{k}", get(preview))
        .route("/jobs/{id}/result", get(result))
        .route("/jobs/{id}/result/image", get(result_image))
        .route("/jobs/{id}/image", get(input_image))
        .route("/jobs/{id}/mask", get(input_mask))
        .route("/jobs/{id}/cancel", post(cancel))
        .fallback(|| async { ApiError::not_found("route") })
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors)
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

fn decode_png(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    BASE64
        .decode(text.trim())
        .map_err(|e| ApiError(ErrorCode::BadRequest, format!("{field}: invalid base64: {e}")))
}

async fn submit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<JobEnvelope>)> {
    let request: SubmitRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError(ErrorCode::BadRequest, format!("invalid request body: {e}")))?;
    let image = Image::from_png_bytes(&decode_png("image_png", &request.image_png)?)
        .map_err(|e| ApiError(ErrorCode::InvalidSpec, format!("image_png: {e}")))?;
    let mask = match &request.mask_png {
        Some(text) => Some(
            Mask::from_png_bytes(&decode_png("mask_png", text)?)
                .map_err(|e| ApiError(ErrorCode::InvalidSpec, format!("mask_png: {e}")))?,
        ),
        None => None,
    };
    if let Some(m) = &mask {
        if m.dims() != image.dims() {
            return Err(ApiError(
                ErrorCode::InvalidSpec,
                format!("mask is {}x{} but the image is {}x{}", m.width, m.height, image.width, image.height),
            ));
        }
    }

    let id = state.registry.next_id();
    let dir = state.config.root.join(&id);
    let mut spec = JobSpec::new(
        dir.join(jobs::INPUT_IMAGE),
        &request.prompt_original,
        &request.prompt_edit,
        request.pairs,
    );
    spec.mask = mask.as_ref().map(|_| dir.join(jobs::INPUT_MASK));
    spec.hyperparams = request.hyperparams.unwrap_or_default();
    spec.backend = request.backend.unwrap_or_else(|| state.config.backend.clone());
    spec.encoder = request.encoder.unwrap_or_default();
    spec.validate(image.dims())
        .map_err(|e| ApiError(ErrorCode::InvalidSpec, e.to_string()))?;

    let internal = |e: clipdrag::Error| ApiError(ErrorCode::Internal, e.to_string());
    std::fs::create_dir_all(&dir).map_err(|e| internal(e.into()))?;
    image.save_png(&spec.image).map_err(internal)?;
    if let (Some(m), Some(path)) = (&mask, &spec.mask) {
        m.save_png(path).map_err(internal)?;
    }
    bundle::write_atomic(&dir.join(bundle::SPEC_FILE), spec.to_toml().map_err(internal)?.as_bytes())
        .map_err(internal)?;
    let handle = Arc::new(JobHandle::new(dir, JobEnvelope::new(id.clone(), spec, mask.is_some())));
    handle.persist();
    state.registry.insert(handle.clone());
    info!("job {id}: queued");

    let workers = state.workers.clone();
    let worker_handle = handle.clone();
    tokio::spawn(async move {
        let Ok(_permit) = workers.acquire_owned().await else {
            return;
        };
        let _ = tokio::task::spawn_blocking(move || jobs::run_job(&worker_handle)).await;
    });
    Ok((StatusCode::CREATED, Json(handle.envelope())))
}

async fn list(State(state): State<Arc<AppState>>) -> Json<JobList> {
    Json(JobList {
        jobs: state.registry.all().iter().map(|h| h.envelope()).collect(),
    })
}

async fn status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobEnvelope>> {
    Ok(Json(state.job(&id)?.envelope()))
}

fn query_usize(query: &HashMap<String, String>, key: &str, default: usize) -> ApiResult<usize> {
    match query.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError(ErrorCode::BadRequest, format!("{key} must be a non-negative integer"))),
    }
}

async fn trajectory(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Json<TrajectoryPage>> {
    let job = state.job(&id)?;
    let offset = query_usize(&query, "offset", 0)?;
    let limit = query_usize(&query, "limit", DEFAULT_PAGE)?.min(MAX_PAGE);
    let (total, records) = job.trajectory_page(offset, limit);
    Ok(Json(TrajectoryPage {
        job_id: id,
        total,
        offset,
        records,
    }))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], bytes).into_response()
}

async fn read_png(path: PathBuf, what: String) -> ApiResult<Response> {
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(png_response(bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::not_found(what)),
        Err(e) => Err(ApiError(ErrorCode::Internal, e.to_string())),
    }
}

async fn preview(
    State(state): State<Arc<AppState>>,
    Path((id, k)): Path<(String, String)>,
) -> ApiResult<Response> {
    let job = state.job(&id)?;
    let k: usize = k
        .parse()
        .map_err(|_| ApiError(ErrorCode::BadRequest, "iteration must be a non-negative integer".into()))?;
    let path = job.dir.join(bundle::PREVIEW_DIR).join(bundle::preview_name(k));
    read_png(path, format!("preview for iteration {k}")).await
}

fn finished(job: &JobHandle) -> ApiResult<ResultSummary> {
    let status = job.status();
    if !status.is_terminal() {
        return Err(ApiError(ErrorCode::NotReady, format!("job {} is {status:?}", job.id).to_lowercase()));
    }
    job.summary()
        .ok_or_else(|| ApiError(ErrorCode::NotReady, format!("result of job {} is not written yet", job.id)))
}

async fn result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ResultSummary>> {
    let job = state.job(&id)?;
    Ok(Json(finished(&job)?))
}

async fn result_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.job(&id)?;
    let summary = finished(&job)?;
    if !summary.has_image {
        return Err(ApiError::not_found(format!("edited image of {:?} job {id}", summary.status).to_lowercase()));
    }
    read_png(job.dir.join(bundle::EDITED_FILE), "edited image".into()).await
}

async fn input_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.job(&id)?;
    read_png(job.dir.join(jobs::INPUT_IMAGE), "input image".into()).await
}

async fn input_mask(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.job(&id)?;
    read_png(job.dir.join(jobs::INPUT_MASK), format!("mask of job {id}")).await
}

async fn cancel(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<(StatusCode, Json<JobEnvelope>)> {
    let job = state.job(&id)?;
    if !job.request_cancel() {
        return Err(ApiError(
            ErrorCode::Conflict,
            format!("job {id} already finished as {:?}", job.status()).to_lowercase(),
        ));
    }
    Ok((StatusCode::ACCEPTED, Json(job.envelope())))
}
