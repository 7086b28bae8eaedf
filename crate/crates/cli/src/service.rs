//! HTTP front end over [`JobManager`].
//!
//! | route | |
//! |---|---|
//! | `POST /jobs` | multipart `content`, `style`, `config`, optional `guidance`, `points` and mask parts |
//! | `GET /jobs/{id}` | status snapshot |
//! | `GET /jobs/{id}/result` | final PNG |
//! | `GET /jobs/{id}/preview` | latest intermediate PNG |
//! | `DELETE /jobs/{id}` | cooperative cancel |
//! | `GET /regimes` | `(beta, gamma)` presets |
//! | `GET /schema/guidance.json` | guidance document schema |
//! | `GET /` | static UI |
//!
//! Mask parts are matched to the names used in the guidance document, by
//! part name first and then by file name.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use stylecore::dst::CorrespondenceDocument;
use stylecore::guidance::GuidanceDocument;
use stylecore::ImageBuffer;

use crate::config::{regime_table, JobConfig};
use crate::jobs::{Cancel, JobManager};
use crate::run::{check_inputs, field_path, JobInputs};

pub const GUIDANCE_SCHEMA: &str = include_str!("../schema/guidance.schema.json");
const BUILTIN_INDEX: &str = include_str!("../assets/index.html");
const BODY_LIMIT: usize = 64 << 20;

#[derive(Clone)]
pub struct AppState {
    pub jobs: Arc<JobManager>,
    pub assets: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, field: None, message: message.into() }
    }

    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, field: Some(field.into()), message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no job {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.message});
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let mut app = Router::new()
        .route("/", get(index))
        .route("/jobs", axum::routing::post(create_job))
        .route("/jobs/{id}", get(job_status).delete(cancel_job))
        .route("/jobs/{id}/result", get(job_result))
        .route("/jobs/{id}/preview", get(job_preview))
        .route("/regimes", get(|| async { Json(regime_table()) }))
        .route("/schema/guidance.json", get(schema))
        .layer(DefaultBodyLimit::max(BODY_LIMIT));
    if let Some(dir) = &state.assets {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.with_state(state)
}

/// Serves until interrupted.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{} with {} worker(s)", listener.local_addr()?, state.jobs.workers());
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn index(State(state): State<AppState>) -> Response {
    if let Some(dir) = &state.assets {
        if let Ok(text) = tokio::fs::read_to_string(dir.join("index.html")).await {
            return Html(text).into_response();
        }
    }
    Html(BUILTIN_INDEX).into_response()
}

async fn schema() -> Response {
    ([(header::CONTENT_TYPE, "application/schema+json")], GUIDANCE_SCHEMA).into_response()
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Default)]
struct Upload {
    text: HashMap<String, String>,
    /// Binary parts keyed by part name and by file name.
    files: HashMap<String, Vec<u8>>,
}

async fn read_upload(mut mp: Multipart) -> ApiResult<Upload> {
    let mut up = Upload::default();
    while let Some(part) = mp.next_field().await.map_err(|e| ApiError::field("body", e.body_text()))? {
        let name = part.name().unwrap_or_default().to_string();
        let file = part.file_name().map(str::to_string);
        let bytes = part.bytes().await.map_err(|e| ApiError::field(name.clone(), e.body_text()))?.to_vec();
        if matches!(name.as_str(), "config" | "guidance" | "points") {
            let text = String::from_utf8(bytes).map_err(|_| ApiError::field(name.clone(), "not UTF-8 text"))?;
            up.text.insert(name, text);
        } else {
            if let Some(f) = file {
                up.files.entry(f).or_insert_with(|| bytes.clone());
            }
            up.files.insert(name, bytes);
        }
    }
    Ok(up)
}

fn image_part(up: &Upload, name: &str) -> ApiResult<ImageBuffer> {
    let bytes = up.files.get(name).ok_or_else(|| ApiError::field(name, "missing image part"))?;
    ImageBuffer::decode(bytes).map_err(|e| ApiError::field(name, e.to_string()))
}

/// Turns multipart fields into a validated config and inputs.
fn parse_upload(up: &Upload) -> ApiResult<(JobConfig, JobInputs)> {
    let content = image_part(up, "content")?;
    let style = image_part(up, "style")?;
    let cdims = (content.height(), content.width());
    let sdims = (style.height(), style.width());
    let config = match up.text.get("config") {
        Some(t) => JobConfig::parse(t).map_err(|e| ApiError::field(e.field, e.message))?,
        None => JobConfig::parse(r#"{"kind": "strotss"}"#).expect("default config parses"),
    };
    let prefixed = |root: &str, e: &stylecore::Error| {
        let (f, msg) = field_path(root, e);
        ApiError::field(f, msg)
    };
    let guidance = match up.text.get("guidance") {
        None => None,
        Some(t) => {
            let doc = GuidanceDocument::parse(t).map_err(|e| ApiError::field("guidance", e.to_string()))?;
            let load = |name: &str| match up.files.get(name) {
                Some(b) => ImageBuffer::decode_mask(b),
                None => Err(stylecore::Error::InvalidArgument(format!("no uploaded part named {name:?}"))),
            };
            Some(doc.resolve(&load, cdims, sdims).map_err(|e| prefixed("guidance", &e))?)
        }
    };
    let points = match up.text.get("points") {
        None => None,
        Some(t) => Some(CorrespondenceDocument::parse(t).map_err(|e| ApiError::field("points", e.to_string()))?),
    };
    let inputs = JobInputs { content, style, guidance, points };
    check_inputs(&config, &inputs).map_err(|(f, msg)| ApiError::field(f, msg))?;
    Ok((config, inputs))
}

async fn create_job(State(state): State<AppState>, mp: Multipart) -> ApiResult<Response> {
    let up = read_upload(mp).await?;
    let (config, inputs) = tokio::task::spawn_blocking(move || parse_upload(&up))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let job = state.jobs.submit(config, inputs);
    Ok((StatusCode::ACCEPTED, Json(job.snapshot())).into_response())
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = state.jobs.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(job.snapshot()))
}

async fn job_result(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.jobs.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    match job.result_png() {
        Some(bytes) => Ok(png(bytes.to_vec())),
        None => {
            let status = job.snapshot()["status"].as_str().unwrap_or_default().to_string();
            Err(ApiError::new(StatusCode::CONFLICT, format!("job is {status}; no result")))
        }
    }
}

async fn job_preview(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.jobs.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    if let Some(bytes) = job.result_png() {
        return Ok(png(bytes.to_vec()));
    }
    match job.preview_png() {
        Some(bytes) => Ok(png(bytes.as_ref().clone())),
        None => Err(ApiError::new(StatusCode::CONFLICT, "no preview yet")),
    }
}

async fn cancel_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    match state.jobs.cancel(&id) {
        None => Err(ApiError::not_found(&id)),
        Some(Cancel::AlreadyFinished) => Err(ApiError::new(StatusCode::CONFLICT, "job already finished")),
        Some(Cancel::Requested) => {
            let job = state.jobs.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
            Ok((StatusCode::ACCEPTED, Json(job.snapshot())).into_response())
        }
    }
}
