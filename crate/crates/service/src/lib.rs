//! HTTP evaluation service. Model owners upload scored datasets and ask for
//! fairness aggregates; demographic labels stay inside the process.

pub mod audit;
pub mod config;
pub mod evaluate;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use eqtreat_core::data::{ingest_jsonl_str, join_groups, DataError, Dataset};
use eqtreat_core::dp::DpError;
use eqtreat_core::parity::MetricError;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinHandle;

pub use audit::{AuditAction, AuditLog, AuditRecord};
pub use config::ServiceConfig;
pub use evaluate::{evaluate, Cell, EvaluationRequest, EvaluationResponse, MetricKind, MetricResult};
pub use store::DemographicStore;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("payload exceeds the configured limit of {limit} bytes")]
    PayloadTooLarge { limit: usize },
    #[error("missing or invalid caller token")]
    Unauthorized,
    #[error("dimension `{0}` holds noised labels; enable dp with its rho")]
    DpRequired(String),
    #[error("{0} cannot be computed from noised labels")]
    UnsupportedDp(MetricKind),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownDataset(_) => "UNKNOWN_DATASET",
            Self::UnknownDimension(_) => "UNKNOWN_DIMENSION",
            Self::InvalidRequest(_) => "INVALID_REQUEST",
            Self::PayloadTooLarge { .. } => "PAYLOAD_TOO_LARGE",
            Self::Unauthorized => "UNAUTHORIZED",
            Self::DpRequired(_) => "DP_REQUIRED",
            Self::UnsupportedDp(_) => "DP_UNSUPPORTED_METRIC",
            Self::Config(_) => "INVALID_CONFIG",
            Self::Io { .. } => "IO_ERROR",
            Self::Data(e) => e.code(),
            Self::Metric(e) => e.code(),
            Self::Dp(e) => e.code(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownDataset(_) => StatusCode::NOT_FOUND,
            Self::UnknownDimension(_) | Self::InvalidRequest(_) | Self::Data(_) => StatusCode::BAD_REQUEST,
            Self::PayloadTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            Self::Unauthorized => StatusCode::UNAUTHORIZED,
            Self::DpRequired(_) | Self::UnsupportedDp(_) | Self::Metric(_) | Self::Dp(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Config(_) | Self::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadResponse {
    pub dataset_id: String,
    pub rows: usize,
    /// Rows whose member is absent from each store dimension.
    pub unknown: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResponse {
    pub records: Vec<AuditRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub dimensions: Vec<String>,
    pub store_digest: String,
    pub suppression_threshold: usize,
}

#[derive(Debug, Default, Deserialize)]
struct AuditQuery {
    from: Option<DateTime<Utc>>,
    to: Option<DateTime<Utc>>,
}

pub struct AppState {
    store: DemographicStore,
    datasets: RwLock<HashMap<String, Arc<Dataset>>>,
    audit: AuditLog,
    dataset_dir: Option<PathBuf>,
    max_payload_bytes: usize,
    caller_token: Option<String>,
}

impl AppState {
    pub fn new(store: DemographicStore, audit: AuditLog, cfg: &ServiceConfig) -> Self {
        Self {
            store,
            datasets: RwLock::new(HashMap::new()),
            audit,
            dataset_dir: cfg.dataset_dir.clone(),
            max_payload_bytes: cfg.max_payload_bytes,
            caller_token: cfg.caller_token.clone(),
        }
    }

    /// Store and audit log as named by the config.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let path = cfg
            .store_path
            .as_ref()
            .ok_or_else(|| ServiceError::Config("store_path is required".into()))?;
        let store = DemographicStore::load(path, cfg.suppression_threshold)?;
        let audit = match &cfg.audit_path {
            Some(p) => AuditLog::open(p)?,
            None => AuditLog::in_memory(),
        };
        if let Some(dir) = &cfg.dataset_dir {
            std::fs::create_dir_all(dir).map_err(|source| ServiceError::Io {
                context: format!("creating {}", dir.display()),
                source,
            })?;
        }
        Ok(Self::new(store, audit, cfg))
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn store(&self) -> &DemographicStore {
        &self.store
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<String, ServiceError> {
        if let Some(token) = &self.caller_token {
            let given = headers
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "));
            if given != Some(token.as_str()) {
                return Err(ServiceError::Unauthorized);
            }
        }
        Ok(headers
            .get("x-caller")
            .and_then(|v| v.to_str().ok())
            .unwrap_or("anonymous")
            .to_string())
    }

    fn dataset(&self, id: &str) -> Result<Arc<Dataset>, ServiceError> {
        if let Some(d) = self.datasets.read().expect("dataset lock").get(id) {
            return Ok(d.clone());
        }
        let missing = || ServiceError::UnknownDataset(id.to_string());
        // ids are uuids; anything else never reaches the filesystem
        let dir = self.dataset_dir.as_ref().ok_or_else(missing)?;
        uuid::Uuid::try_parse(id).map_err(|_| missing())?;
        let text = std::fs::read_to_string(dir.join(format!("{id}.jsonl"))).map_err(|_| missing())?;
        let d = Arc::new(ingest_jsonl_str(&text, id)?);
        self.datasets.write().expect("dataset lock").insert(id.to_string(), d.clone());
        Ok(d)
    }
}

fn body_text(body: Result<Bytes, BytesRejection>, limit: usize) -> Result<String, ServiceError> {
    let bytes = body.map_err(|rejection| match rejection.status() {
        StatusCode::PAYLOAD_TOO_LARGE => ServiceError::PayloadTooLarge { limit },
        _ => ServiceError::InvalidRequest(rejection.body_text()),
    })?;
    String::from_utf8(bytes.to_vec()).map_err(|_| ServiceError::InvalidRequest("body is not UTF-8".into()))
}

async fn upload(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<UploadResponse>, ServiceError> {
    let caller = state.authorize(&headers)?;
    let text = body_text(body, state.max_payload_bytes)?;
    let worker = state.clone();
    let (dataset, unknown) = tokio::task::spawn_blocking(move || {
        let d = ingest_jsonl_str(&text, "upload")?;
        let unknown = worker
            .store
            .assignments()
            .map(|g| (g.dimension().to_string(), join_groups(&d, g).unknown_count()))
            .collect::<BTreeMap<_, _>>();
        Ok::<_, ServiceError>((d, unknown))
    })
    .await
    .map_err(|e| ServiceError::InvalidRequest(format!("upload worker failed: {e}")))??;

    let id = uuid::Uuid::new_v4().to_string();
    if let Some(dir) = &state.dataset_dir {
        std::fs::write(dir.join(format!("{id}.jsonl")), dataset.to_jsonl()).map_err(|source| ServiceError::Io {
            context: "persisting dataset".into(),
            source,
        })?;
    }
    let rows = dataset.len();
    state.datasets.write().expect("dataset lock").insert(id.clone(), Arc::new(dataset));
    state.audit.append(&caller, AuditAction::Upload, &id, None, None)?;
    tracing::info!(dataset_id = %id, rows, caller = %caller, "dataset uploaded");
    Ok(Json(UploadResponse {
        dataset_id: id,
        rows,
        unknown,
    }))
}

async fn evaluate_handler(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<EvaluationResponse>, ServiceError> {
    let caller = state.authorize(&headers)?;
    let text = body_text(body, state.max_payload_bytes)?;
    let req: EvaluationRequest = serde_json::from_str(&text).map_err(|e| ServiceError::InvalidRequest(e.to_string()))?;
    let dataset = state.dataset(&req.dataset_id)?;
    let worker = state.clone();
    let job = req.clone();
    let response = tokio::task::spawn_blocking(move || evaluate(&worker.store, &dataset, &job))
        .await
        .map_err(|e| ServiceError::InvalidRequest(format!("evaluation worker failed: {e}")))??;
    let metric = req.metric.to_string();
    state
        .audit
        .append(&caller, AuditAction::Evaluate, &req.dataset_id, Some(&req.dimension), Some(&metric))?;
    tracing::info!(dataset_id = %req.dataset_id, dimension = %req.dimension, metric = %metric, caller = %caller, "evaluated");
    Ok(Json(response))
}

async fn audit_handler(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    query: Result<Query<AuditQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<AuditResponse>, ServiceError> {
    state.authorize(&headers)?;
    let Query(q) = query.map_err(|e| ServiceError::InvalidRequest(e.body_text()))?;
    Ok(Json(AuditResponse {
        records: state.audit.query(q.from, q.to),
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        dimensions: state.store.dimensions(),
        store_digest: state.store.digest().to_string(),
        suppression_threshold: state.store.policy().suppression_threshold,
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.max_payload_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/datasets", post(upload))
        .route("/v1/evaluate", post(evaluate_handler))
        .route("/v1/audit", get(audit_handler))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds `addr` (port 0 picks one) and serves in the background.
pub async fn start(state: Arc<AppState>, addr: SocketAddr) -> Result<(SocketAddr, JoinHandle<()>), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Io {
        context: format!("binding {addr}"),
        source,
    })?;
    let local = listener.local_addr().map_err(|source| ServiceError::Io {
        context: "reading bound address".into(),
        source,
    })?;
    let app = router(state);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok((local, handle))
}

/// Runs until interrupted.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let addr = cfg.listen_addr()?;
    let state = Arc::new(AppState::from_config(&cfg)?);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Io {
        context: format!("binding {addr}"),
        source,
    })?;
    tracing::info!(%addr, dimensions = ?state.store.dimensions(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| ServiceError::Io {
            context: "serving".into(),
            source,
        })
}
