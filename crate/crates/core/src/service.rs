//! HTTP inference service.
//!
//! - `POST /inpaint`: base64 PNG image + mask in, base64 PNG samples out.
//! - `GET /model-info`: mode, pyramid depth, input-size constraint, checkpoint hash.
//! - `GET /health`: liveness, never touches the model.

use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::data::{composite, decode_mask_png, decode_png, encode_png};
use crate::error::{Result, SpnError};
use crate::model::{sample_seed, InpaintModel, Inpainter, SEED_MASK};

pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "yes")]
    pub composited: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
pub struct ModelSummary {
    pub checkpoint: String,
    pub mode: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct InpaintResponse {
    pub images: Vec<String>,
    pub seeds: Vec<u64>,
    pub model_info: ModelSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
pub struct ModelInfo {
    pub mode: String,
    pub levels: usize,
    /// Image sides must be multiples of this.
    pub size_multiple: usize,
    pub checkpoint_hash: String,
    pub max_samples: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// Shared service state. The model sits behind a lock so a reload waits for
/// in-flight requests to finish.
pub struct ServiceState {
    model: RwLock<Option<Arc<Inpainter>>>,
    pub max_samples: usize,
}

impl ServiceState {
    pub fn new(max_samples: usize) -> Self {
        ServiceState { model: RwLock::new(None), max_samples }
    }

    pub fn with_model(model: Inpainter, max_samples: usize) -> Self {
        let s = ServiceState::new(max_samples);
        s.install(model);
        s
    }

    pub fn install(&self, model: Inpainter) {
        *self.model.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(model));
    }

    pub fn load(&self, dir: &Path) -> Result<()> {
        self.install(Inpainter::load(dir)?);
        Ok(())
    }

    pub fn model(&self) -> Option<Arc<Inpainter>> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

fn not_loaded() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "model not loaded")
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: VERSION.into() })
}

async fn model_info(State(state): State<Arc<ServiceState>>) -> Response {
    let Some(model) = state.model() else { return not_loaded() };
    Json(ModelInfo {
        mode: model.mode().as_str().into(),
        levels: model.levels(),
        size_multiple: model.size_multiple(),
        checkpoint_hash: model.hash.clone(),
        max_samples: state.max_samples,
    })
    .into_response()
}

enum Failure {
    BadRequest(String),
    Internal(String),
}

fn decode_b64(field: &str, text: &str) -> std::result::Result<Vec<u8>, Failure> {
    // Tolerate data-URL prefixes from browser canvases.
    let payload = text.split_once(";base64,").map_or(text, |(_, rest)| rest);
    B64.decode(payload.trim()).map_err(|e| Failure::BadRequest(format!("{field}: invalid base64: {e}")))
}

fn run_inpaint(model: &Inpainter, req: &InpaintRequest, samples: usize, seed: u64) -> std::result::Result<Vec<(u64, String)>, Failure> {
    let image = decode_png(&decode_b64("image", &req.image)?).map_err(|e| Failure::BadRequest(format!("image: {e}")))?;
    let mask = decode_mask_png(&decode_b64("mask", &req.mask)?).map_err(|e| Failure::BadRequest(format!("mask: {e}")))?;
    if (image.height(), image.width()) != mask.shape() {
        return Err(Failure::BadRequest(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let m = model.size_multiple();
    if image.height() % m != 0 || image.width() % m != 0 {
        return Err(Failure::BadRequest(format!("image sides must be multiples of {m}")));
    }
    (0..samples as u64)
        .map(|i| {
            let s = sample_seed(seed, i);
            let raw = model.inpaint(&image, &mask, s).map_err(|e| match e {
                SpnError::Shape(msg) | SpnError::Invalid(msg) => Failure::BadRequest(msg),
                other => Failure::Internal(other.to_string()),
            })?;
            let out = if req.composited {
                composite(&raw, &image, &mask).map_err(|e| Failure::Internal(e.to_string()))?
            } else {
                raw
            };
            let png = encode_png(&out).map_err(|e| Failure::Internal(e.to_string()))?;
            Ok((s, B64.encode(png)))
        })
        .collect()
}

async fn inpaint(State(state): State<Arc<ServiceState>>, Json(req): Json<InpaintRequest>) -> Response {
    let Some(model) = state.model() else { return not_loaded() };
    if req.samples == 0 || req.samples > state.max_samples {
        return error(StatusCode::BAD_REQUEST, format!("samples must be in 1..={}", state.max_samples));
    }
    let (samples, warning) = if !model.is_probabilistic() && req.samples > 1 {
        (1, Some(format!("deterministic model: {} samples requested, returning 1", req.samples)))
    } else {
        (req.samples, None)
    };
    let seed = req.seed.unwrap_or_else(rand::random) & SEED_MASK;
    let worker_model = model.clone();
    let worker_req = req.clone();
    let result = tokio::task::spawn_blocking(move || run_inpaint(&worker_model, &worker_req, samples, seed)).await;
    let outputs = match result {
        Ok(Ok(o)) => o,
        Ok(Err(Failure::BadRequest(msg))) => return error(StatusCode::BAD_REQUEST, msg),
        Ok(Err(Failure::Internal(msg))) => return error(StatusCode::INTERNAL_SERVER_ERROR, msg),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")),
    };
    let status = if warning.is_some() { StatusCode::CONFLICT } else { StatusCode::OK };
    let (seeds, images) = outputs.into_iter().unzip();
    let body = InpaintResponse {
        images,
        seeds,
        model_info: ModelSummary { checkpoint: model.hash.clone(), mode: model.mode().as_str().into() },
        warning,
    };
    (status, Json(body)).into_response()
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model-info", get(model_info))
        .route("/inpaint", post(inpaint))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Binds `0.0.0.0:port` and serves until the process exits.
pub async fn serve(state: Arc<ServiceState>, port: u16) -> Result<()> {
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| SpnError::io(format!("tcp://{addr}"), e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state)).await.map_err(|e| SpnError::io(format!("tcp://{addr}"), e))
}
