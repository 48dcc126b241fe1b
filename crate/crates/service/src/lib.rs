//! HTTP retrieval service over one checkpoint and its embedding store.
//!
//! Readers take a snapshot `Arc` of the store, so a query sees either the
//! store before an ingest or the one after it. Ingests are serialized by a
//! mutex and promote a fully built staged store in a single swap.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use ctcbir_core::embed_index::{
    embed_into, embed_slice, load_store, query, save_store, EmbeddingStore, QueryOptions, RetrievalResult,
};
use ctcbir_core::eval::{explain_slice, saliency_on_slice};
use ctcbir_core::imaging::{
    decode_packed, discover_volumes, raw_companions, save_raw, ClipWindow, CtVolume, SliceRecord, Split,
};
use ctcbir_core::relax::{generate_masks, DEFAULT_GRID, DEFAULT_N_MASKS, DEFAULT_P};
use ctcbir_core::render::slice_png;
use ctcbir_core::ssl::{load_checkpoint, Checkpoint};
use ctcbir_core::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub checkpoint: PathBuf,
    pub store: PathBuf,
    /// Directory of raw volumes; ingested volumes are written here too.
    pub data_root: PathBuf,
    /// Default mask count for explanations.
    pub n_masks: usize,
    pub max_concurrent_explanations: usize,
    /// Seed of the explanation masks when the request does not give one.
    pub mask_seed: u64,
    /// When set, every route except `/health` needs `Authorization: Bearer <token>`.
    pub auth_token: Option<String>,
}

impl ServiceConfig {
    pub fn new(checkpoint: PathBuf, store: PathBuf, data_root: PathBuf) -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint,
            store,
            data_root,
            n_masks: DEFAULT_N_MASKS,
            max_concurrent_explanations: 2,
            mask_seed: 0,
            auth_token: None,
        }
    }

    pub fn validate(&self) -> ctcbir_core::Result<()> {
        for (what, p) in [("checkpoint", &self.checkpoint), ("store", &self.store)] {
            if !p.is_file() {
                return Err(Error::invalid(format!("{what} {} does not exist", p.display())));
            }
        }
        if !self.data_root.is_dir() {
            return Err(Error::invalid(format!("data root {} is not a directory", self.data_root.display())));
        }
        if self.n_masks == 0 {
            return Err(Error::invalid("n_masks must be at least 1"));
        }
        if self.max_concurrent_explanations == 0 {
            return Err(Error::invalid("max_concurrent_explanations must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ExplainKey {
    slice_id: String,
    fingerprint: String,
    n_masks: usize,
    seed: u64,
}

struct Shared {
    config: ServiceConfig,
    checkpoint: Checkpoint,
    store: RwLock<Arc<EmbeddingStore>>,
    volumes: RwLock<HashMap<String, Arc<CtVolume>>>,
    ingest: tokio::sync::Mutex<()>,
    explain_slots: Arc<Semaphore>,
    explain_cache: Mutex<HashMap<ExplainKey, Bytes>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// Loads the checkpoint, the store and every volume under the data root.
    pub fn open(config: ServiceConfig) -> ctcbir_core::Result<Self> {
        config.validate()?;
        let checkpoint = load_checkpoint(&config.checkpoint)?;
        let store = load_store(&config.store)?;
        let volumes = discover_volumes(&config.data_root)?
            .iter()
            .map(|s| s.load())
            .collect::<ctcbir_core::Result<Vec<_>>>()?;
        Ok(Self::from_parts(config, checkpoint, store, volumes))
    }

    /// State from already loaded parts; `config` paths are only used for persistence.
    pub fn from_parts(config: ServiceConfig, checkpoint: Checkpoint, store: EmbeddingStore, volumes: Vec<CtVolume>) -> Self {
        if store.fingerprint() != checkpoint.fingerprint {
            tracing::warn!(
                store = store.fingerprint(),
                checkpoint = %checkpoint.fingerprint,
                "store and checkpoint differ; ingestion is disabled"
            );
        }
        let volumes = volumes.into_iter().map(|v| (v.volume_id.clone(), Arc::new(v))).collect();
        Self(Arc::new(Shared {
            explain_slots: Arc::new(Semaphore::new(config.max_concurrent_explanations.max(1))),
            config,
            checkpoint,
            store: RwLock::new(Arc::new(store)),
            volumes: RwLock::new(volumes),
            ingest: tokio::sync::Mutex::new(()),
            explain_cache: Mutex::new(HashMap::new()),
        }))
    }

    /// Snapshot of the active store.
    pub fn store(&self) -> Arc<EmbeddingStore> {
        self.0.store.read().expect("store lock").clone()
    }

    fn volume(&self, id: &str) -> Option<Arc<CtVolume>> {
        self.0.volumes.read().expect("volume lock").get(id).cloned()
    }

    /// Pixels and mask of a stored slice.
    fn slice_record(&self, slice_id: &str) -> Result<SliceRecord, ApiError> {
        let missing = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown slice {slice_id}"));
        let (volume_id, index) = slice_id.rsplit_once(':').ok_or_else(missing)?;
        let index: usize = index.parse().map_err(|_| missing())?;
        let volume = self.volume(volume_id).ok_or_else(missing)?;
        if index >= volume.depth() {
            return Err(missing());
        }
        Ok(SliceRecord::from_volume(&volume, index, Split::Test, 0))
    }
}

// --- errors -----------------------------------------------------------------------

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            retry_after: None,
        }
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::EmptyCandidates | Error::StoreConsistency(_) | Error::DuplicateId(_) => StatusCode::CONFLICT,
            Error::InvalidArgument(_)
            | Error::Format { .. }
            | Error::Alignment { .. }
            | Error::NumericDegeneracy(_)
            | Error::Checksum { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let message = match e {
            Error::EmptyCandidates => "no candidates left after the volume filter; check restrict_to_volume".to_string(),
            other => other.to_string(),
        };
        Self::new(status, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(serde_json::json!({ "error": self.message }))).into_response();
        if let Some(secs) = self.retry_after {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

type ApiResult<T> = Result<T, ApiError>;

// --- handlers ---------------------------------------------------------------------

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let store = state.store();
    Json(serde_json::json!({
        "status": "ok",
        "fingerprint": state.0.checkpoint.fingerprint,
        "count": store.len(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ActiveStore {
    pub fingerprint: String,
    pub count: usize,
    pub dim: usize,
    pub volumes: usize,
}

async fn active_store(State(state): State<AppState>) -> Json<ActiveStore> {
    let store = state.store();
    let mut vols: Vec<&str> = store.volume_ids().collect();
    vols.sort_unstable();
    vols.dedup();
    Json(ActiveStore {
        fingerprint: store.fingerprint().to_string(),
        count: store.len(),
        dim: store.dim(),
        volumes: vols.len(),
    })
}

#[derive(Debug, Deserialize)]
struct SliceParams {
    window: Option<String>,
}

async fn slice_image(State(state): State<AppState>, Path(id): Path<String>, Query(p): Query<SliceParams>) -> ApiResult<Response> {
    let window: ClipWindow = match p.window.as_deref() {
        None => ClipWindow::WIDE,
        Some(w) => w.parse()?,
    };
    let rec = state.slice_record(&id)?;
    let png = slice_png(rec.hu.view(), window)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestResponse {
    pub volume_id: String,
    pub n_slices: usize,
    pub count: usize,
}

async fn ingest(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<IngestResponse>)> {
    let volume = decode_packed(&body)?;
    let _writer = state.0.ingest.lock().await;
    let current = state.store();
    if current.fingerprint() != state.0.checkpoint.fingerprint {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!(
                "active store was built with model {}, service checkpoint is {}",
                current.fingerprint(),
                state.0.checkpoint.fingerprint
            ),
        ));
    }
    let id = volume.volume_id.clone();
    if state.volume(&id).is_some() || current.volume_ids().any(|v| v == id) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("volume {id} already exists")));
    }

    let worker = state.clone();
    let (volume, staged) = tokio::task::spawn_blocking(move || -> ctcbir_core::Result<_> {
        let records: Vec<SliceRecord> = (0..volume.depth()).map(|i| SliceRecord::from_volume(&volume, i, Split::Test, 0)).collect();
        let mut staged = (*current).clone();
        embed_into(&mut staged, &worker.0.checkpoint, &records)?;
        let header_path = save_raw(&volume, &worker.0.config.data_root)?;
        if let Err(e) = save_store(&staged, &worker.0.config.store) {
            let (data, mask) = raw_companions(&header_path);
            for p in [header_path, data, mask] {
                let _ = std::fs::remove_file(p);
            }
            return Err(e);
        }
        Ok((volume, staged))
    })
    .await
    .map_err(ApiError::internal)??;

    let n_slices = volume.depth();
    let count = staged.len();
    state.0.volumes.write().expect("volume lock").insert(id.clone(), Arc::new(volume));
    *state.0.store.write().expect("store lock") = Arc::new(staged);
    tracing::info!(volume = %id, n_slices, count, "ingested volume");
    Ok((
        StatusCode::CREATED,
        Json(IngestResponse {
            volume_id: id,
            n_slices,
            count,
        }),
    ))
}

fn default_k() -> usize {
    5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    #[serde(default)]
    pub slice_id: Option<String>,
    /// Base64 of a packed single-slice volume.
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub restrict_to_volume: Option<String>,
    /// Leave the query slice itself out of the hits (stored queries only).
    #[serde(default = "default_true")]
    pub exclude_self: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitView {
    pub slice_id: String,
    pub similarity: f64,
    pub volume_id: String,
    pub liver_label: bool,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_id: Option<String>,
    pub k: usize,
    pub clamped: bool,
    pub hits: Vec<HitView>,
}

impl From<RetrievalResult> for QueryResponse {
    fn from(r: RetrievalResult) -> Self {
        Self {
            query_id: r.query_id,
            k: r.k,
            clamped: r.clamped,
            hits: r
                .hits
                .into_iter()
                .map(|h| HitView {
                    image_url: format!("/slices/{}", h.slice_id),
                    slice_id: h.slice_id,
                    similarity: h.similarity,
                    volume_id: h.volume_id,
                    liver_label: h.liver_label,
                })
                .collect(),
        }
    }
}

async fn handle_query(State(state): State<AppState>, Json(req): Json<QueryRequest>) -> ApiResult<Json<QueryResponse>> {
    let store = state.store();
    let restrict = req.restrict_to_volume.as_deref();
    let result = match (&req.slice_id, &req.image) {
        (Some(id), None) => {
            let entry = store.get(id).ok_or_else(|| Error::NotFound(id.clone()))?;
            let opts = QueryOptions {
                exclude_id: req.exclude_self.then_some(id.as_str()),
                restrict_to: restrict,
            };
            let mut r = query(&store, entry.vector, req.k, opts)?;
            r.query_id = Some(id.clone());
            r
        }
        (None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| Error::invalid(format!("image is not base64: {e}")))?;
            let volume = decode_packed(&bytes)?;
            if volume.depth() != 1 {
                return Err(Error::invalid(format!("uploaded image must have one slice, got {}", volume.depth())).into());
            }
            let v = embed_slice(&state.0.checkpoint.model, volume.slice(0), ClipWindow::WIDE)?;
            let opts = QueryOptions {
                exclude_id: None,
                restrict_to: restrict,
            };
            query(&store, &v, req.k, opts)?
        }
        _ => return Err(Error::invalid("give exactly one of slice_id and image").into()),
    };
    Ok(Json(result.into()))
}

#[derive(Debug, Deserialize)]
struct ExplainParams {
    n_masks: Option<usize>,
    seed: Option<u64>,
}

/// Body of an explanation response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub slice_id: String,
    pub n_masks: usize,
    pub grid: (usize, usize),
    pub p: f64,
    pub seed: u64,
    pub model_fingerprint: String,
    pub n_skipped: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major importance on the slice grid.
    pub importance: Vec<f32>,
}

async fn explain(State(state): State<AppState>, Path(id): Path<String>, Query(p): Query<ExplainParams>) -> ApiResult<Response> {
    let n_masks = p.n_masks.unwrap_or(state.0.config.n_masks);
    if n_masks == 0 {
        return Err(Error::invalid("n_masks must be at least 1").into());
    }
    let record = state.slice_record(&id)?;
    let key = ExplainKey {
        slice_id: id.clone(),
        fingerprint: state.0.checkpoint.fingerprint.clone(),
        n_masks,
        seed: p.seed.unwrap_or(state.0.config.mask_seed),
    };
    let cached = state.0.explain_cache.lock().expect("cache lock").get(&key).cloned();
    let (body, hit) = match cached {
        Some(b) => (b, true),
        None => {
            let permit = state.0.explain_slots.clone().try_acquire_owned().map_err(|_| ApiError {
                retry_after: Some(1),
                ..ApiError::new(StatusCode::TOO_MANY_REQUESTS, "explanation capacity exhausted; retry later")
            })?;
            let worker = state.clone();
            let k = key.clone();
            let body = tokio::task::spawn_blocking(move || -> ctcbir_core::Result<Bytes> {
                let _permit = permit;
                let model = &worker.0.checkpoint.model;
                let masks = generate_masks(k.n_masks, DEFAULT_GRID, DEFAULT_P, model.input_size(), k.seed)?;
                let map = explain_slice(model, &record, &masks)?;
                let r = saliency_on_slice(&map, record.hu.dim());
                let (height, width) = r.dim();
                let out = Explanation {
                    slice_id: k.slice_id.clone(),
                    n_masks: k.n_masks,
                    grid: DEFAULT_GRID,
                    p: DEFAULT_P,
                    seed: k.seed,
                    model_fingerprint: k.fingerprint.clone(),
                    n_skipped: map.n_skipped,
                    height,
                    width,
                    importance: r.iter().map(|&v| v as f32).collect(),
                };
                Ok(Bytes::from(serde_json::to_vec(&out)?))
            })
            .await
            .map_err(ApiError::internal)??;
            state.0.explain_cache.lock().expect("cache lock").insert(key, body.clone());
            (body, false)
        }
    };
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    headers.insert("x-cache", HeaderValue::from_static(if hit { "hit" } else { "miss" }));
    Ok((headers, body).into_response())
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.0.config.auth_token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if req.uri().path() != "/health" && given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/slices/{id}", get(slice_image))
        .route("/volumes", post(ingest))
        .route("/query", post(handle_query))
        .route("/explain/{slice_id}", get(explain))
        .route("/stores/active", get(active_store))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(axum::extract::DefaultBodyLimit::max(512 * 1024 * 1024))
        .with_state(state)
}

/// Binds `config.listen` and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> ctcbir_core::Result<()> {
    let listen = config.listen;
    let state = tokio::task::spawn_blocking(move || AppState::open(config))
        .await
        .map_err(|e| Error::invalid(e.to_string()))??;
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| Error::invalid(format!("cannot bind {listen}: {e}")))?;
    tracing::info!(%listen, count = state.store().len(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::invalid(e.to_string()))
}
