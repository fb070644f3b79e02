//! HTTP front end for the detector.
//!
//! `POST /detect` takes an encoded image (PNG, TIFF or raw f32) and returns the
//! blob set, the radius histogram and per-stage timings. `GET /healthz` never
//! waits on the detection queue.
//!
//! Detection runs on a fixed number of blocking workers. Requests beyond
//! `workers + backlog` are rejected with 503 instead of being buffered.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use droplet::detector::BlobSetDocument;
use droplet::image_core::{decode_image_as, ImageFormat};
use droplet::{BackendKind, DetectionParams, Detector, RadiusHistogram, StageTimings};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub const DEFAULT_MAX_REQUEST_BYTES: usize = 16 * 1024 * 1024;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_CACHE_SIZE: usize = 4;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub params: DetectionParams,
    pub max_request_bytes: usize,
    pub request_timeout_ms: u64,
    pub workers: usize,
    /// Requests allowed to wait for a worker.
    pub backlog: usize,
    pub cache_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            params: DetectionParams::default(),
            max_request_bytes: DEFAULT_MAX_REQUEST_BYTES,
            request_timeout_ms: DEFAULT_TIMEOUT_MS,
            workers,
            backlog: 2 * workers,
            cache_size: DEFAULT_CACHE_SIZE,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Detector(#[from] droplet::Error),
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.workers == 0 {
            return Err(ServiceError::Config("worker count must be at least 1".into()));
        }
        if self.cache_size == 0 {
            return Err(ServiceError::Config("detector cache size must be at least 1".into()));
        }
        // a 16-bit 1000x1000 frame is ~2 MB as PNG and 4 MB as raw f32
        if self.max_request_bytes < 8 + 4 * 1000 * 1000 {
            return Err(ServiceError::Config(format!(
                "max request bytes {} cannot hold a 1000x1000 frame",
                self.max_request_bytes
            )));
        }
        self.params.validate()?;
        Ok(())
    }
}

/// An HTTP error with a JSON body.
#[derive(Clone, Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<droplet::Error> for ApiError {
    fn from(e: droplet::Error) -> Self {
        use droplet::Error as E;
        let status = match &e {
            E::InvalidParameter(_) | E::InvalidImage(_) | E::UnsupportedFormat(_) | E::Decode(_) => {
                StatusCode::BAD_REQUEST
            }
            E::ResourceLimit { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type DetectorCell = Arc<OnceLock<Result<Arc<Detector>, ApiError>>>;

/// Small LRU of detectors keyed by parameter set. Concurrent requests for the
/// same parameters share one construction.
pub struct DetectorCache {
    capacity: usize,
    entries: Mutex<VecDeque<(String, DetectorCell)>>,
    builds: AtomicUsize,
}

impl DetectorCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: Mutex::new(VecDeque::new()),
            builds: AtomicUsize::new(0),
        }
    }

    /// Number of detectors constructed so far.
    pub fn builds(&self) -> usize {
        self.builds.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, params: &DetectionParams) -> Result<Arc<Detector>, ApiError> {
        let key = params.to_json();
        let cell = {
            let mut entries = self.entries.lock().expect("cache poisoned");
            let cell = match entries.iter().position(|(k, _)| *k == key) {
                Some(i) => entries.remove(i).expect("index in range").1,
                None => DetectorCell::default(),
            };
            entries.push_back((key, cell.clone()));
            while entries.len() > self.capacity {
                entries.pop_front();
            }
            cell
        };
        cell.get_or_init(|| {
            self.builds.fetch_add(1, Ordering::Relaxed);
            Detector::new(params.clone()).map(Arc::new).map_err(ApiError::from)
        })
        .clone()
    }
}

struct Inner {
    config: ServiceConfig,
    detectors: DetectorCache,
    started: Instant,
    requests: AtomicU64,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        Ok(AppState(Arc::new(Inner {
            detectors: DetectorCache::new(config.cache_size),
            started: Instant::now(),
            requests: AtomicU64::new(0),
            admission: Arc::new(Semaphore::new(config.workers + config.backlog)),
            workers: Arc::new(Semaphore::new(config.workers)),
            config,
        })))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    pub fn detectors(&self) -> &DetectorCache {
        &self.0.detectors
    }

    pub fn requests(&self) -> u64 {
        self.0.requests.load(Ordering::Relaxed)
    }

    /// Detection requests currently running or waiting for a worker.
    pub fn in_flight(&self) -> usize {
        self.0.config.workers + self.0.config.backlog - self.0.admission.available_permits()
    }
}

/// Per-request overrides of the service's default detection parameters.
#[derive(Clone, Debug, Default, Deserialize)]
pub struct DetectQuery {
    pub name: Option<String>,
    pub min_sigma: Option<f64>,
    pub max_sigma: Option<f64>,
    pub n_bin: Option<usize>,
    pub truncate: Option<f64>,
    pub threshold: Option<f64>,
    pub overlap: Option<f64>,
    /// Disables overlap pruning.
    pub no_prune: Option<bool>,
    pub neighborhood: Option<usize>,
    pub backend: Option<String>,
    pub preprocess: Option<bool>,
    pub smooth_sigma: Option<f64>,
    pub saturation: Option<f64>,
}

impl DetectQuery {
    pub fn apply(&self, base: &DetectionParams) -> Result<DetectionParams, ApiError> {
        let mut p = base.clone();
        if let Some(v) = self.min_sigma {
            p.min_sigma = v;
        }
        if let Some(v) = self.max_sigma {
            p.max_sigma = v;
        }
        if let Some(v) = self.n_bin {
            p.n_bin = v;
        }
        if let Some(v) = self.truncate {
            p.truncate = v;
        }
        if let Some(v) = self.threshold {
            p.threshold = v;
        }
        if let Some(v) = self.overlap {
            p.overlap = Some(v);
        }
        if self.no_prune == Some(true) {
            p.overlap = None;
        }
        if let Some(v) = self.neighborhood {
            p.neighborhood = v;
        }
        if let Some(b) = &self.backend {
            p.backend = b.parse::<BackendKind>()?;
        }
        if let Some(v) = self.preprocess {
            p.preprocess.enabled = v;
        }
        if let Some(v) = self.smooth_sigma {
            p.preprocess.smooth_sigma = v;
        }
        if let Some(v) = self.saturation {
            p.preprocess.saturation = v;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectResponse {
    #[serde(flatten)]
    pub result: BlobSetDocument,
    pub histogram: RadiusHistogram,
    pub timings: StageTimings,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub params: DetectionParams,
    pub uptime_s: f64,
    pub requests: u64,
}

fn format_from_headers(headers: &HeaderMap) -> Option<ImageFormat> {
    let value = headers.get(header::CONTENT_TYPE)?.to_str().ok()?;
    let mime = value.split(';').next()?.trim().to_ascii_lowercase();
    match mime.as_str() {
        "image/png" => Some(ImageFormat::Png),
        "image/tiff" => Some(ImageFormat::Tiff),
        "application/x-droplet-raw" | "application/x-raw-f32" => Some(ImageFormat::Raw),
        _ => None,
    }
}

async fn handle_detect(
    State(state): State<AppState>,
    Query(query): Query<DetectQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<DetectResponse>, ApiError> {
    let inner = &state.0;
    if body.len() > inner.config.max_request_bytes {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "request body too large"));
    }
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty request body"));
    }
    let params = query.apply(&inner.config.params)?;
    let admitted = inner
        .admission
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "detection queue is full"))?;

    let timeout = Duration::from_millis(inner.config.request_timeout_ms);
    let workers = inner.workers.clone();
    let task_state = state.clone();
    let name = query.name.clone().unwrap_or_else(|| "upload".to_string());
    let format = format_from_headers(&headers).unwrap_or_else(|| ImageFormat::sniff(&body));
    let job = async move {
        let worker = workers
            .acquire_owned()
            .await
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service shutting down"))?;
        tokio::task::spawn_blocking(move || {
            // both permits live until the work is done, even if the client gave up
            let _permits = (admitted, worker);
            let image = decode_image_as(&body, format)?;
            let detector = task_state.0.detectors.get(&params)?;
            let detection = detector.detect(&image)?;
            Ok::<_, ApiError>(DetectResponse {
                result: detection.blobs.to_document(name),
                histogram: detection.histogram,
                timings: detection.timings,
            })
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
    };
    let response = tokio::time::timeout(timeout, job)
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "detection timed out"))??;
    inner.requests.fetch_add(1, Ordering::Relaxed);
    Ok(Json(response))
}

async fn handle_health(State(state): State<AppState>) -> Json<HealthResponse> {
    let inner = &state.0;
    Json(HealthResponse {
        status: "ok".to_string(),
        params: inner.config.params.clone(),
        uptime_s: inner.started.elapsed().as_secs_f64(),
        requests: inner.requests.load(Ordering::Relaxed),
    })
}

pub fn router(state: AppState) -> Router {
    let limit = state.config().max_request_bytes;
    Router::new()
        .route("/detect", post(handle_detect))
        .route("/healthz", get(handle_health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

/// Binds `config.listen` and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(state.config().listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
