//! HTTP label service: runs active-learning sessions whose oracle is a
//! person answering through JSON endpoints.
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | POST | `/sessions` | experiment config with `"oracle": "deferred"` → `{id, status}` |
//! | GET | `/sessions/{id}` | status summary |
//! | GET | `/sessions/{id}/pending` | samples waiting for a label |
//! | POST | `/sessions/{id}/labels` | `{"labels": {"<id>": class}}` → `{accepted, pending_remaining, status}` |
//! | GET | `/sessions/{id}/metrics` | metrics log so far; `?format=csv` for CSV |
//! | GET | `/sessions/{id}/scatter` | labeled points so far |

mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dral_core::experiment::{metrics_csv, ExperimentConfig, MetricsLog};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use session::{
    CreateError, DeferredOracle, PendingSample, Registry, Session, SessionStatus, SubmitError, SubmitOutcome,
    PREVIEW_LEN,
};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        let status = match e {
            SubmitError::Conflict { .. } => StatusCode::CONFLICT,
            SubmitError::OutOfRange { .. } | SubmitError::NotPending(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<CreateError> for ApiError {
    fn from(e: CreateError) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: u64,
    pub status: SessionStatus,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub id: u64,
    pub status: SessionStatus,
    pub error: Option<String>,
    pub num_classes: usize,
    pub pending: usize,
    pub rounds: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PendingReply {
    pub id: u64,
    pub status: SessionStatus,
    pub num_classes: usize,
    pub pending: Vec<PendingSample>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub labels: BTreeMap<usize, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsReply {
    pub id: u64,
    pub status: SessionStatus,
    #[serde(flatten)]
    pub log: MetricsLog,
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    format: Option<String>,
}

/// Unknown and malformed ids are both "not found".
fn session(reg: &Registry, id: &str) -> ApiResult<Arc<Session>> {
    id.parse()
        .ok()
        .and_then(|id| reg.get(id))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
}

async fn create(State(reg): State<Arc<Registry>>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let config = ExperimentConfig::from_json(text)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid config: {e}")))?;
    // dataset loading and generation are blocking work
    let reg2 = reg.clone();
    let s = tokio::task::spawn_blocking(move || reg2.create(config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    log::info!("session {} created ({})", s.id(), s.config().strategy);
    // the loop may already be waiting on its seed labels; the session itself starts running
    Ok((StatusCode::CREATED, Json(Created { id: s.id(), status: SessionStatus::Running })))
}

async fn summary(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Json<Summary>> {
    let s = session(&reg, &id)?;
    Ok(Json(Summary {
        id: s.id(),
        status: s.status(),
        error: s.error(),
        num_classes: s.num_classes(),
        pending: s.pending().len(),
        rounds: s.metrics().rows.len(),
    }))
}

async fn pending(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Json<PendingReply>> {
    let s = session(&reg, &id)?;
    let (status, pending) = s.status_and_pending();
    Ok(Json(PendingReply { id: s.id(), status, num_classes: s.num_classes(), pending }))
}

async fn labels(
    State(reg): State<Arc<Registry>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SubmitOutcome>> {
    let s = session(&reg, &id)?;
    let req: LabelRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("expected {{\"labels\": {{id: class}}}}: {e}")))?;
    Ok(Json(s.submit(&req.labels)?))
}

async fn metrics(
    State(reg): State<Arc<Registry>>,
    Path(id): Path<String>,
    Query(q): Query<MetricsQuery>,
) -> ApiResult<Response> {
    let s = session(&reg, &id)?;
    let log = s.metrics();
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(MetricsReply { id: s.id(), status: s.status(), log }).into_response()),
        Some("csv") => {
            let csv =
                metrics_csv([&log]).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
        }
        Some(other) => {
            Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown format {other:?}; use json or csv")))
        }
    }
}

async fn scatter(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = session(&reg, &id)?;
    Ok(Json(s.scatter()).into_response())
}

/// The API routes over a shared registry.
pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/pending", get(pending))
        .route("/sessions/{id}/labels", post(labels))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/scatter", get(scatter))
        .with_state(registry)
}

/// API routes plus, optionally, static UI files served from `/`.
pub fn app(registry: Arc<Registry>, ui_dir: Option<PathBuf>) -> Router {
    let api = router(registry);
    let api = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.layer(CorsLayer::permissive())
}

/// Serves until ctrl-c. `on_bound` receives the bound address, which is
/// useful with port 0.
pub async fn serve(
    addr: SocketAddr,
    registry: Arc<Registry>,
    ui_dir: Option<PathBuf>,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, app(registry, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
