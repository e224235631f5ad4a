//! HTTP facade over a TELII data directory.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/healthz` | |
//! | GET | `/events?q=&limit=` | |
//! | GET | `/events/{id}` | |
//! | POST | `/query/coexist` | `{events, count_only, limit, offset}` |
//! | POST | `/query/before` | `{a, b, within, count_only, limit, offset}` |
//! | POST | `/query/explore` | `{event, direction, within, top_k}` |
//! | GET | `/stats` | |
//!
//! Errors are `{code, message}` with `code` one of `NOT_FOUND`,
//! `INVALID_ARGUMENT`, `CAP_EXCEEDED` or `INTERNAL`.

pub mod api;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use telii::StoreHandle;
use tower_http::cors::{Any, CorsLayer};

use api::{BeforeRequest, CoexistRequest, EventView, ExploreRequest, MAX_PAGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    NotFound,
    InvalidArgument,
    CapExceeded,
    Internal,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub near: Vec<String>,
}

impl ApiError {
    fn invalid(message: impl Into<String>) -> Self {
        ApiError {
            code: ErrorCode::InvalidArgument,
            message: message.into(),
            near: Vec::new(),
        }
    }

    fn status(&self) -> StatusCode {
        match self.code {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::InvalidArgument => StatusCode::BAD_REQUEST,
            ErrorCode::CapExceeded => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<telii::Error> for ApiError {
    fn from(err: telii::Error) -> Self {
        use telii::Error as E;
        let code = match &err {
            E::NotFound { .. } => ErrorCode::NotFound,
            E::CapExceeded { .. } => ErrorCode::CapExceeded,
            E::InvalidArgument(_) | E::MissingIndex(_) | E::UnknownDomain(_) | E::Field { .. } | E::Date { .. } => {
                ErrorCode::InvalidArgument
            }
            _ => ErrorCode::Internal,
        };
        if code == ErrorCode::Internal {
            tracing::error!(error = %err, "query failed");
        }
        let near = match &err {
            E::NotFound { near, .. } => near.clone(),
            _ => Vec::new(),
        };
        ApiError {
            code,
            message: err.to_string(),
            near,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        ApiError::invalid(rejection.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(rejection: QueryRejection) -> Self {
        ApiError::invalid(rejection.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone)]
struct AppState {
    store: Arc<StoreHandle>,
}

/// Runs a blocking query off the async workers.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&StoreHandle) -> telii::Result<T> + Send + 'static,
) -> ApiResult<T> {
    let store = state.store.clone();
    match tokio::task::spawn_blocking(move || f(&store)).await {
        Ok(result) => Ok(Json(result?)),
        Err(err) => Err(ApiError {
            code: ErrorCode::Internal,
            message: format!("query task failed: {err}"),
            near: Vec::new(),
        }),
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    patients: usize,
    events: usize,
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        patients: state.store.patient_count(),
        events: state.store.catalog().len(),
    })
}

#[derive(Deserialize)]
struct SearchParams {
    #[serde(default)]
    q: String,
    #[serde(default)]
    limit: Option<usize>,
}

#[derive(Serialize)]
struct SearchResponse {
    elapsed_ms: f64,
    events: Vec<EventView>,
}

async fn search_events(
    State(state): State<AppState>,
    params: Result<Query<SearchParams>, QueryRejection>,
) -> ApiResult<SearchResponse> {
    let Query(params) = params?;
    let started = Instant::now();
    let limit = params.limit.unwrap_or(20).min(MAX_PAGE);
    let events = state
        .store
        .catalog()
        .search(&params.q, limit)
        .into_iter()
        .map(EventView::from)
        .collect();
    Ok(Json(SearchResponse {
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        events,
    }))
}

async fn get_event(State(state): State<AppState>, Path(reference): Path<String>) -> ApiResult<EventView> {
    let catalog = state.store.catalog();
    let id = catalog.resolve(&reference)?;
    Ok(Json(EventView::from(catalog.get(id).expect("resolved id"))))
}

async fn coexist(
    State(state): State<AppState>,
    body: Result<Json<CoexistRequest>, JsonRejection>,
) -> ApiResult<api::CohortResponse> {
    let Json(req) = body?;
    blocking(&state, move |store| api::coexist(store, &req, MAX_PAGE)).await
}

async fn before(
    State(state): State<AppState>,
    body: Result<Json<BeforeRequest>, JsonRejection>,
) -> ApiResult<api::CohortResponse> {
    let Json(req) = body?;
    blocking(&state, move |store| api::before(store, &req, MAX_PAGE)).await
}

async fn explore(
    State(state): State<AppState>,
    body: Result<Json<ExploreRequest>, JsonRejection>,
) -> ApiResult<api::ExploreResponse> {
    let Json(req) = body?;
    blocking(&state, move |store| api::explore(store, &req)).await
}

async fn stats(State(state): State<AppState>) -> Json<api::StatsResponse> {
    Json(api::stats(&state.store))
}

async fn not_found() -> ApiError {
    ApiError {
        code: ErrorCode::NotFound,
        message: "no such endpoint".into(),
        near: Vec::new(),
    }
}

/// The service routes over a shared store. `cors_origin` enables CORS for
/// one origin (`*` for any).
pub fn router(store: Arc<StoreHandle>, cors_origin: Option<&str>) -> Result<Router, ServeError> {
    let mut app = Router::new()
        .route("/healthz", get(healthz))
        .route("/events", get(search_events))
        .route("/events/{id}", get(get_event))
        .route("/query/coexist", post(coexist))
        .route("/query/before", post(before))
        .route("/query/explore", post(explore))
        .route("/stats", get(stats))
        .fallback(not_found)
        .with_state(AppState { store });
    if let Some(origin) = cors_origin {
        let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
        let cors = if origin == "*" {
            cors.allow_origin(Any)
        } else {
            let value = HeaderValue::from_str(origin).map_err(|_| ServeError::Cors(origin.to_string()))?;
            cors.allow_origin(value)
        };
        app = app.layer(cors);
    }
    Ok(app)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    pub addr: SocketAddr,
    pub cors_origin: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] telii::Error),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("invalid CORS origin {0:?}")]
    Cors(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binds the listener; fails if the address is in use.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })
}

/// Opens the store and serves until Ctrl-C.
pub async fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let store = Arc::new(StoreHandle::open(&config.data_dir)?);
    let app = router(store.clone(), config.cors_origin.as_deref())?;
    let listener = bind(config.addr).await?;
    tracing::info!(
        addr = %listener.local_addr()?,
        patients = store.patient_count(),
        events = store.catalog().len(),
        "serving"
    );
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
