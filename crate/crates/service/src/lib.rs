//! HTTP inference over a loaded [`EnhancerBundle`].
//!
//! `POST /api/enhance` and `GET /api/health`; every other path is served
//! from the static asset directory when one is configured, else 404.

mod api;
mod error;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::routing::{any, get, post};
use axum::{Json, Router};
use lowlight::pipeline::EnhancerBundle;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub use api::{enhance_request, EnhanceOptions, EnhanceRequest, EnhanceResponse, Health, HealthStatus};
pub use error::{ApiError, ErrorBody, ErrorDetail};

/// 32 megapixels.
pub const DEFAULT_MAX_PIXELS: u64 = 32_000_000;
pub const DEFAULT_MAX_BODY_BYTES: usize = 256 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_pixels: u64,
    pub max_body_bytes: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_pixels: DEFAULT_MAX_PIXELS,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            static_dir: None,
        }
    }
}

struct AppState {
    bundle: Option<Arc<EnhancerBundle>>,
    health: Health,
    max_pixels: u64,
}

/// Builds the application. The bundle is shared read-only across requests.
pub fn router(bundle: Option<EnhancerBundle>, config: &ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        health: Health::of(bundle.as_ref()),
        bundle: bundle.map(Arc::new),
        max_pixels: config.max_pixels,
    });
    let app = Router::new()
        .route("/api/enhance", post(enhance))
        .route("/api/health", get(health))
        .route("/api/{*rest}", any(not_found))
        .layer(DefaultBodyLimit::max(config.max_body_bytes))
        .with_state(state);
    match &config.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(not_found),
    }
}

/// Serves until ctrl-c.
pub async fn serve(listener: TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Binds `addr`; port 0 picks a free port, reported by the returned address.
pub async fn bind(addr: SocketAddr) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(state.health.clone())
}

async fn enhance(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<EnhanceRequest>, JsonRejection>,
) -> Result<Json<EnhanceResponse>, ApiError> {
    let Json(request) = payload.map_err(|r| {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::PayloadTooLarge
        } else {
            ApiError::MalformedRequest(r.body_text())
        }
    })?;
    let bundle = state.bundle.clone();
    let max_pixels = state.max_pixels;
    tokio::task::spawn_blocking(move || enhance_request(bundle.as_deref(), &request, max_pixels))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
}

async fn not_found() -> ApiError {
    ApiError::NotFound
}
