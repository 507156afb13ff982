//! HTTP render service for a fitted avatar.
//!
//! Endpoints: `GET /meta`, `POST /render`, `GET /expressions`, and the viewer's
//! static files under `/ui/`. Until the avatar has loaded every API endpoint
//! answers 503.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tower_http::services::ServeDir;

use morphavatar_core::pipeline::{PipelineError, RenderRequest, ServiceMeta};
use morphavatar_core::AvatarFile;

pub const CLAMPED_HEADER: &str = "x-view-clamped";
pub const AZIMUTH_HEADER: &str = "x-view-azimuth";
pub const ELEVATION_HEADER: &str = "x-view-elevation";

/// Shared service state. The avatar is set once and never mutated.
#[derive(Default)]
pub struct ServiceState {
    avatar: OnceLock<Arc<AvatarFile>>,
    pub renders: AtomicU64,
    pub rejected: AtomicU64,
}

impl ServiceState {
    pub fn loading() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn ready(avatar: AvatarFile) -> Arc<Self> {
        let s = Self::loading();
        s.set_avatar(avatar);
        s
    }

    /// Returns false if an avatar was already set.
    pub fn set_avatar(&self, avatar: AvatarFile) -> bool {
        self.avatar.set(Arc::new(avatar)).is_ok()
    }

    pub fn avatar(&self) -> Option<Arc<AvatarFile>> {
        self.avatar.get().cloned()
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_length: Option<usize>,
}

fn error(status: StatusCode, message: impl Into<String>, expected_length: Option<usize>) -> Response {
    (status, Json(ErrorBody { error: message.into(), expected_length })).into_response()
}

fn loading() -> Response {
    let mut r = error(StatusCode::SERVICE_UNAVAILABLE, "avatar is still loading", None);
    r.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
    r
}

pub fn router(state: Arc<ServiceState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/meta", get(meta))
        .route("/render", post(render))
        .route("/expressions", get(expressions))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

async fn meta(State(state): State<Arc<ServiceState>>) -> Response {
    match state.avatar() {
        Some(a) => Json(ServiceMeta::of(&a)).into_response(),
        None => loading(),
    }
}

async fn expressions(State(state): State<Arc<ServiceState>>) -> Response {
    match state.avatar() {
        Some(a) => match &a.expressions {
            Some(db) => Json(db).into_response(),
            None => error(StatusCode::NOT_FOUND, "this avatar has no expression database", None),
        },
        None => loading(),
    }
}

async fn render(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let Some(avatar) = state.avatar() else {
        return loading();
    };
    let req: RenderRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            state.rejected.fetch_add(1, Ordering::Relaxed);
            let k = avatar.avatar.model.k_expr;
            return error(StatusCode::BAD_REQUEST, format!("malformed render request: {e}"), Some(k));
        }
    };
    let result = tokio::task::spawn_blocking(move || {
        let r = req.render(&avatar)?;
        let png = r.image.to_png_bytes()?;
        Ok::<_, PipelineError>((r, png))
    })
    .await;
    match result {
        Ok(Ok((r, png))) => {
            state.renders.fetch_add(1, Ordering::Relaxed);
            let headers = [
                (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
                (header::HeaderName::from_static(CLAMPED_HEADER), HeaderValue::from_static(if r.clamped { "true" } else { "false" })),
                (header::HeaderName::from_static(AZIMUTH_HEADER), HeaderValue::from_str(&r.azimuth.to_string()).unwrap()),
                (header::HeaderName::from_static(ELEVATION_HEADER), HeaderValue::from_str(&r.elevation.to_string()).unwrap()),
            ];
            (headers, png).into_response()
        }
        Ok(Err(e)) => {
            state.rejected.fetch_add(1, Ordering::Relaxed);
            match e {
                PipelineError::ParameterLength { expected, .. } => error(StatusCode::BAD_REQUEST, e.to_string(), Some(expected)),
                e if e.is_invalid_input() => error(StatusCode::BAD_REQUEST, e.to_string(), None),
                e => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
            }
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}"), None),
    }
}
