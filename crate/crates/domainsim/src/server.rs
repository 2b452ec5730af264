//! The probe HTTP API. Every error is a 400 with `{code, message}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower_http::services::ServeDir;

use crate::probe::{classify, EnsembleHandle, ProbeRequest, ProbeServiceError, SessionStore};

pub struct AppState {
    pub handle: Arc<EnsembleHandle>,
    pub store: SessionStore,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

pub struct ApiError(ProbeServiceError);

impl From<ProbeServiceError> for ApiError {
    fn from(e: ProbeServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (StatusCode::BAD_REQUEST, Json(ErrorBody { code: self.0.code(), message: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ProbeServiceError> {
    serde_json::from_slice(body).map_err(|e| ProbeServiceError::BadRequest(e.to_string()))
}

async fn run_classify(state: &Arc<AppState>, req: ProbeRequest) -> Result<domainsim_core::probe::ProbeResult, ProbeServiceError> {
    let handle = state.handle.clone();
    tokio::task::spawn_blocking(move || classify(&handle, &req)).await.map_err(|e| ProbeServiceError::BadRequest(e.to_string()))?
}

async fn probe(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: ProbeRequest = parse(&body)?;
    Ok(Json(run_classify(&state, req).await?))
}

async fn create_session(State(state): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    Ok(Json(serde_json::json!({ "session_id": state.store.create()? })))
}

async fn append_step(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: ProbeRequest = parse(&body)?;
    // fail fast on a bad id before paying for inference
    state.store.session(&id)?;
    let note = req.note.clone();
    let result = run_classify(&state, req).await?;
    Ok(Json(state.store.append(&id, result, note)?))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(state.store.session(&id)?))
}

async fn session_log(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let bytes = state.store.log(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes))
}

async fn close_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    state.store.close(&id)?;
    Ok(Json(state.store.session(&id)?))
}

async fn ensemble(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(state.handle.info())
}

async fn unknown_api() -> ApiError {
    ApiError(ProbeServiceError::BadRequest("no such endpoint".into()))
}

/// The API under `/api`, and `static_dir` (the console build) under `/`.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/probe", post(probe))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/steps", post(append_step))
        .route("/sessions/{id}/log", get(session_log))
        .route("/sessions/{id}/close", post(close_session))
        .route("/ensemble", get(ensemble))
        .fallback(unknown_api)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(state: Arc<AppState>, static_dir: Option<PathBuf>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("probe service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await
}
