//! REST front end for the pairwise rating store.
//!
//! | route | |
//! |---|---|
//! | `POST /sessions` | `{items, raters_per_item?, seed?}` → `201 {session_id, quota}` |
//! | `GET /sessions/{sid}/next?rater=R` | `200` assignment, or `204` when nothing is left for `R` |
//! | `POST /sessions/{sid}/ratings` | `{item_id, rater, choices}` → `201` |
//! | `GET /sessions/{sid}/aggregate?mode=pooled\|majority` | `200` table |
//! | `GET /assets/...` | plan images |
//!
//! Errors are `{"error": message, "code": kind}` with 400 (validation),
//! 404 (unknown session or item) or 409 (duplicate, quota).

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use planweave_core::rater::{
    AggregateMode, AggregateTable, AssignmentView, ItemSpec, RaterError, RaterStore, RatingSubmission,
    DEFAULT_RATERS_PER_ITEM,
};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub const ASSETS_PREFIX: &str = "/assets";

#[derive(Clone)]
struct AppState {
    store: Arc<RaterStore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub items: Vec<ItemSpec>,
    #[serde(default)]
    pub raters_per_item: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub quota: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingAck {
    pub item_id: String,
    pub rater: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub code: String,
}

struct ApiError(StatusCode, ErrorBody);

impl From<RaterError> for ApiError {
    fn from(e: RaterError) -> Self {
        let (status, code) = match &e {
            RaterError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            RaterError::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            RaterError::DuplicateItem(_) => (StatusCode::BAD_REQUEST, "duplicate_item"),
            RaterError::NoItems => (StatusCode::BAD_REQUEST, "no_items"),
            RaterError::BadQuota => (StatusCode::BAD_REQUEST, "bad_quota"),
            RaterError::MissingAspect(_) => (StatusCode::BAD_REQUEST, "missing_aspect"),
            RaterError::UnknownAspect(_) => (StatusCode::BAD_REQUEST, "unknown_aspect"),
            RaterError::InvalidChoice(_) => (StatusCode::BAD_REQUEST, "invalid_choice"),
            RaterError::EmptyRater => (StatusCode::BAD_REQUEST, "empty_rater"),
            RaterError::AlreadySubmitted { .. } => (StatusCode::CONFLICT, "already_submitted"),
            RaterError::QuotaExhausted(_) => (StatusCode::CONFLICT, "quota_exhausted"),
            RaterError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        ApiError(status, ErrorBody { error: e.to_string(), code: code.into() })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

/// Store calls fsync, so they run off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, RaterError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody { error: e.to_string(), code: "internal".into() }))?
        .map_err(ApiError::from)
}

async fn create_session(
    State(s): State<AppState>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let raters = body.raters_per_item.unwrap_or(DEFAULT_RATERS_PER_ITEM);
    let n = body.items.len();
    let store = s.store.clone();
    let session_id = blocking(move || store.create_session(body.items, raters, body.seed)).await?;
    tracing::info!(%session_id, items = n, raters, "session created");
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id, quota: n * raters })))
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    rater: String,
}

async fn next(
    State(s): State<AppState>,
    Path(sid): Path<String>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    let store = s.store.clone();
    let item = blocking(move || store.next_assignment(&sid, &q.rater)).await?;
    Ok(match item {
        Some(item) => Json(AssignmentView::new(&item, ASSETS_PREFIX)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(
    State(s): State<AppState>,
    Path(sid): Path<String>,
    Json(body): Json<RatingSubmission>,
) -> Result<(StatusCode, Json<RatingAck>), ApiError> {
    let store = s.store.clone();
    let r = blocking(move || store.submit_rating(&sid, &body)).await?;
    Ok((StatusCode::CREATED, Json(RatingAck { item_id: r.item_id, rater: r.rater })))
}

#[derive(Debug, Deserialize)]
struct AggregateQuery {
    #[serde(default)]
    mode: AggregateMode,
}

async fn aggregate(
    State(s): State<AppState>,
    Path(sid): Path<String>,
    Query(q): Query<AggregateQuery>,
) -> Result<Json<AggregateTable>, ApiError> {
    Ok(Json(s.store.aggregate(&sid, q.mode)?))
}

/// API routes, `/assets` from `assets_dir`, and optionally a static UI bundle
/// at `/`.
pub fn router(store: Arc<RaterStore>, assets_dir: Option<PathBuf>, ui_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{sid}/next", get(next))
        .route("/sessions/{sid}/ratings", post(submit))
        .route("/sessions/{sid}/aggregate", get(aggregate))
        .with_state(AppState { store });
    if let Some(dir) = assets_dir {
        app = app.nest_service(ASSETS_PREFIX, ServeDir::new(dir));
    }
    if let Some(dir) = ui_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(CorsLayer::permissive())
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    /// where session logs live
    pub data_dir: PathBuf,
    pub assets_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
}

/// Binds and serves until ctrl-c.
pub async fn serve(opts: ServeOptions) -> std::io::Result<()> {
    let store = RaterStore::open(&opts.data_dir).map_err(std::io::Error::other)?;
    let app = router(Arc::new(store), opts.assets_dir, opts.ui_dir);
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "rating service listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
