//! REST service over a [`ReviewStore`].
//!
//! Reads clone an `Arc` of the latest immutable view; decisions go through a
//! single writer that appends to the log before publishing a new view.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use longdoc_core::flagging::{Action, Decision, FlagStatus, ReviewStore, ReviewView, StoreError, PROVENANCE_NOTE};
use serde::Deserialize;
use tower_http::services::ServeDir;

pub const BIND_ADDR_ENV: &str = "REVIEW_BIND_ADDR";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
pub const PROVENANCE_HEADER: &str = "x-provenance-note";

const FALLBACK_INDEX: &str = include_str!("../assets/index.html");

pub struct AppState {
    view: RwLock<Arc<ReviewView>>,
    writer: Mutex<ReviewStore>,
}

impl AppState {
    pub fn new(store: ReviewStore) -> Self {
        Self { view: RwLock::new(store.view()), writer: Mutex::new(store) }
    }

    fn view(&self) -> Arc<ReviewView> {
        Arc::clone(&self.view.read().unwrap_or_else(|e| e.into_inner()))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownFlag(_) | StoreError::UnknownItem(_) => StatusCode::NOT_FOUND,
            StoreError::Decision(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBody {
    pub action: Action,
    #[serde(default)]
    pub new_question: Option<String>,
    #[serde(default)]
    pub new_answer: Option<String>,
    #[serde(default)]
    pub added_accepted_answers: Vec<String>,
    pub reviewer: String,
}

/// Build the service. `ui_dir`, when given, replaces the bundled index page.
pub fn router(store: ReviewStore, ui_dir: Option<&Path>) -> Router {
    let state = Arc::new(AppState::new(store));
    let api = Router::new()
        .route("/api/flags", get(list_flags))
        .route("/api/flags/{id}", get(flag_detail))
        .route("/api/flags/{id}/decision", post(record_decision))
        .route("/api/export", get(export))
        .route("/api/stats", get(stats))
        .route("/pages/{page_id}", get(page_image))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(FALLBACK_INDEX) })),
    }
}

async fn list_flags(State(state): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> Result<Response, ApiError> {
    let status = q
        .status
        .filter(|s| !s.is_empty() && s != "all")
        .map(|s| s.parse::<FlagStatus>())
        .transpose()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    Ok(Json(state.view().flags(status)).into_response())
}

async fn flag_detail(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    state
        .view()
        .flag_detail(&id)
        .map(|d| Json(d).into_response())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown flag {id}")))
}

async fn record_decision(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let decision = Decision {
        flag_id: id,
        action: body.action,
        new_question: body.new_question,
        new_answer: body.new_answer,
        added_accepted_answers: body.added_accepted_answers,
        reviewer: body.reviewer,
        timestamp_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0),
    };
    let writer = Arc::clone(&state);
    let view = tokio::task::spawn_blocking(move || {
        let mut store = writer.writer.lock().unwrap_or_else(|e| e.into_inner());
        let view = store.record(decision)?;
        *writer.view.write().unwrap_or_else(|e| e.into_inner()) = Arc::clone(&view);
        Ok::<_, StoreError>(view)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(view.stats()).into_response())
}

async fn export(State(state): State<Arc<AppState>>) -> Response {
    let view = state.view();
    let mut response = Response::new(Body::from(view.export_jsonl().to_string()));
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    headers.insert(PROVENANCE_HEADER, HeaderValue::from_static(PROVENANCE_NOTE));
    response
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    Json(state.view().stats()).into_response()
}

async fn page_image(State(state): State<Arc<AppState>>, UrlPath(page_id): UrlPath<String>) -> Result<Response, ApiError> {
    let path = {
        let store = state.writer.lock().unwrap_or_else(|e| e.into_inner());
        store.page_path(&page_id)
    }
    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown page {page_id}")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// Resolve the bind address: explicit value, then the environment, then the default.
pub fn bind_addr(explicit: Option<&str>) -> anyhow::Result<SocketAddr> {
    let raw = explicit
        .map(str::to_string)
        .or_else(|| std::env::var(BIND_ADDR_ENV).ok())
        .unwrap_or_else(|| DEFAULT_BIND_ADDR.to_string());
    raw.parse().map_err(|e| anyhow::anyhow!("invalid bind address {raw:?}: {e}"))
}

pub async fn serve(store_dir: PathBuf, addr: SocketAddr, ui_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let store = ReviewStore::open(&store_dir)?;
    let app = router(store, ui_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, store = %store_dir.display(), "review service listening");
    axum::serve(listener, app).await?;
    Ok(())
}
