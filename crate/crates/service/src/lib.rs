//! HTTP front end for a trained classifier.
//!
//! `POST /api/v1/predict` takes a multipart `image` field and answers with the
//! class probabilities and, unless `explain=false`, a Grad-CAM overlay as a
//! base64 PNG. Plain predictions run concurrently on the blocking pool;
//! explanations take a lock so at most one runs at a time.

use std::collections::BTreeMap;
use std::future::Future;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tealeaf_core::dataset::ClassRegistry;
use tealeaf_core::explainers::{grad_cam, overlay};
use tealeaf_core::models::{load_checkpoint, Classifier};
use tealeaf_core::preprocess::{preprocess_bytes, PreprocessConfig};
use tokio::net::TcpListener;

pub const DEFAULT_MAX_PAYLOAD: usize = 10 * 1024 * 1024;
pub const DEFAULT_OVERLAY_ALPHA: f32 = 0.4;

/// Room for multipart framing on top of the image itself.
const MULTIPART_SLACK: usize = 64 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub label: String,
    pub confidence: f64,
    pub probabilities: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcam_overlay: Option<String>,
    pub model_version: String,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
    pub classes: Vec<String>,
}

/// A failed request. The message never carries internal detail for 500s.
#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    UnsupportedMediaType(String),
    #[error("image exceeds the {limit}-byte limit")]
    PayloadTooLarge { limit: usize },
    #[error("{0}")]
    BadRequest(String),
    #[error("inference failed")]
    Internal,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnsupportedMediaType(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            ApiError::PayloadTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::UnsupportedMediaType(_) => "unsupported_media_type",
            ApiError::PayloadTooLarge { .. } => "payload_too_large",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Internal => "internal_inference_error",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

/// Failure to bring the server up.
#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Model(#[from] tealeaf_core::Error),
    #[error("address {0} is already in use")]
    PortInUse(String),
    #[error("cannot serve on {addr}: {source}")]
    Io {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

/// The loaded model plus everything needed to answer a request.
pub struct Engine {
    model: Box<dyn Classifier + Send + Sync>,
    registry: ClassRegistry,
    preprocess: PreprocessConfig,
    version: String,
    overlay_alpha: f32,
    explain_lock: Mutex<()>,
}

impl Engine {
    pub fn new(
        model: Box<dyn Classifier + Send + Sync>,
        registry: ClassRegistry,
        preprocess: PreprocessConfig,
        version: impl Into<String>,
    ) -> tealeaf_core::Result<Self> {
        if model.num_classes() != registry.count() {
            return Err(tealeaf_core::Error::RegistryMismatch {
                checkpoint: model.num_classes(),
                registry: registry.count(),
            });
        }
        preprocess.validate()?;
        Ok(Engine {
            model,
            registry,
            preprocess,
            version: version.into(),
            overlay_alpha: DEFAULT_OVERLAY_ALPHA,
            explain_lock: Mutex::new(()),
        })
    }

    pub fn from_checkpoint(path: &Path) -> tealeaf_core::Result<Self> {
        let (model, registry) = load_checkpoint(path)?;
        let preprocess = model.preprocess().clone();
        let version = model.version();
        Engine::new(Box::new(model), registry, preprocess, version)
    }

    pub fn with_overlay_alpha(mut self, alpha: f32) -> Self {
        self.overlay_alpha = alpha;
        self
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ready".into(),
            model_version: self.version.clone(),
            classes: self.registry.names().to_vec(),
        }
    }

    /// Decodes, classifies and optionally explains one encoded image.
    pub fn predict(&self, bytes: &[u8], explain: bool) -> Result<PredictionResponse, ApiError> {
        let start = Instant::now();
        let img = preprocess_bytes(bytes, &self.preprocess)
            .map_err(|_| ApiError::UnsupportedMediaType("body is not a decodable image".into()))?;
        let probs = self.model.predict_image(&img);
        if probs.len() != self.registry.count() || probs.iter().any(|p| !p.is_finite()) {
            log::error!(
                "model produced {} probabilities, finite: {}",
                probs.len(),
                probs.iter().all(|p| p.is_finite())
            );
            return Err(ApiError::Internal);
        }
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        let names = self.registry.names();
        let probabilities = names.iter().zip(&probs).map(|(n, p)| (n.clone(), *p as f64)).collect();
        let gradcam_overlay = if explain {
            let _guard = self.explain_lock.lock().unwrap_or_else(|e| e.into_inner());
            let encoded = grad_cam(self.model.as_ref(), &img, Some(best))
                .and_then(|map| overlay(&map, &img, self.overlay_alpha))
                .map_err(|e| {
                    log::error!("explanation failed: {e}");
                    ApiError::Internal
                })?;
            let mut png = Vec::new();
            encoded
                .to_rgb8()
                .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
                .map_err(|e| {
                    log::error!("overlay encoding failed: {e}");
                    ApiError::Internal
                })?;
            Some(base64::engine::general_purpose::STANDARD.encode(png))
        } else {
            None
        };
        Ok(PredictionResponse {
            label: names[best].clone(),
            confidence: probs[best] as f64,
            probabilities,
            gradcam_overlay,
            model_version: self.version.clone(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Clone)]
struct AppState {
    engine: Arc<Engine>,
    max_payload: usize,
}

#[derive(Debug, Deserialize)]
struct PredictQuery {
    explain: Option<bool>,
}

async fn predict(
    State(state): State<AppState>,
    query: Result<Query<PredictQuery>, QueryRejection>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Json<PredictionResponse>, ApiError> {
    let explain = query
        .map_err(|e| ApiError::BadRequest(e.body_text()))?
        .explain
        .unwrap_or(true);
    let mut multipart =
        multipart.map_err(|_| ApiError::UnsupportedMediaType("expected a multipart/form-data body".into()))?;
    let too_large = ApiError::PayloadTooLarge {
        limit: state.max_payload,
    };
    let mut image = None;
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(too_large),
            Err(e) => return Err(ApiError::BadRequest(e.body_text())),
        };
        if field.name() != Some("image") {
            continue;
        }
        let bytes = field.bytes().await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                ApiError::PayloadTooLarge {
                    limit: state.max_payload,
                }
            } else {
                ApiError::BadRequest(e.body_text())
            }
        })?;
        image = Some(bytes);
    }
    let bytes = image.ok_or_else(|| ApiError::BadRequest("missing multipart field `image`".into()))?;
    if bytes.len() > state.max_payload {
        return Err(too_large);
    }
    let engine = state.engine.clone();
    let out = tokio::task::spawn_blocking(move || engine.predict(&bytes, explain))
        .await
        .map_err(|e| {
            log::error!("inference task failed: {e}");
            ApiError::Internal
        })??;
    Ok(Json(out))
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(state.engine.health())
}

async fn classes(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.engine.registry().names().to_vec())
}

async fn fallback() -> ApiError {
    ApiError::BadRequest("no such endpoint".into())
}

pub fn router(engine: Arc<Engine>, max_payload: usize) -> Router {
    let state = AppState { engine, max_payload };
    Router::new()
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/health", get(health))
        .route("/api/v1/classes", get(classes))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(max_payload + MULTIPART_SLACK))
        .with_state(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub host: String,
    pub port: u16,
    pub max_payload: usize,
    pub overlay_alpha: f32,
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            checkpoint: checkpoint.into(),
            host: "127.0.0.1".into(),
            port: 8080,
            max_payload: DEFAULT_MAX_PAYLOAD,
            overlay_alpha: DEFAULT_OVERLAY_ALPHA,
        }
    }

    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServeError::PortInUse(addr.to_string()),
        _ => ServeError::Io {
            addr: addr.to_string(),
            source: e,
        },
    })
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve_until(
    listener: TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let addr = listener
        .local_addr()
        .map(|a: SocketAddr| a.to_string())
        .unwrap_or_default();
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|source| ServeError::Io { addr, source })
}

/// Loads the checkpoint, binds, and serves until Ctrl-C.
pub async fn run(cfg: &ServiceConfig) -> Result<(), ServeError> {
    let engine = Engine::from_checkpoint(&cfg.checkpoint)?.with_overlay_alpha(cfg.overlay_alpha);
    let listener = bind(&cfg.addr()).await?;
    log::info!(
        "serving {} ({} classes) on {}",
        engine.version(),
        engine.registry().count(),
        cfg.addr()
    );
    let app = router(Arc::new(engine), cfg.max_payload);
    serve_until(listener, app, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
