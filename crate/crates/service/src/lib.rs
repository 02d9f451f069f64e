//! HTTP JSON API over a domain bank for interactive hybrid-domain synthesis.
//!
//! All model state is immutable after startup; each request renders on its own
//! blocking task. Every response carries `X-DoRM-API: 1`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use dorm_core::backbone::{load_source, LatentCode, SourceGenerator};
use dorm_core::dorm::{DomainBank, DormGenerator, MixEntry, MixSpec, Provenance};
use dorm_core::{DormError, Result};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;
use tower_http::set_header::SetResponseHeaderLayer;

pub const API_HEADER: &str = "x-dorm-api";
pub const API_VERSION: &str = "1";
pub const DEFAULT_PORT: u16 = 8765;
/// Upper bound on images per request, for both `count` and interpolation steps.
pub const MAX_IMAGES: usize = 16;

struct Model {
    source: SourceGenerator,
    bank: DomainBank,
    bank_hash: String,
}

/// Shared, read-only server state. A missing bank answers 503 on the model endpoints.
#[derive(Clone, Default)]
pub struct AppState {
    model: Option<Arc<Model>>,
    static_dir: Option<PathBuf>,
}

impl AppState {
    /// Check the bank against the source once; requests never re-validate.
    pub fn new(source: SourceGenerator, bank: DomainBank) -> Result<Self> {
        DormGenerator::new(&source, &bank)?;
        let bank_hash = bank.bank_hash();
        Ok(Self {
            model: Some(Arc::new(Model {
                source,
                bank,
                bank_hash,
            })),
            static_dir: None,
        })
    }

    pub fn without_bank() -> Self {
        Self::default()
    }

    pub fn load(source_ckpt: &Path, bank_dir: &Path) -> Result<Self> {
        let (source, _) = load_source(source_ckpt)?;
        Self::new(source, DomainBank::load(bank_dir)?)
    }

    /// Serve the UI bundle in `dir` at `/` instead of the built-in index page.
    pub fn with_static_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.static_dir = Some(dir.into());
        self
    }

    pub fn bank_hash(&self) -> Option<&str> {
        self.model.as_ref().map(|m| m.bank_hash.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub bank_hash: Option<String>,
    pub domains_count: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainInfo {
    pub name: String,
    pub default_alpha: f32,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainList {
    pub domains: Vec<DomainInfo>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Interpolate {
    pub seed2: u64,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthesizeRequest {
    pub seed: u64,
    #[serde(default)]
    pub mix: Vec<MixEntry>,
    /// Images for seeds `seed, seed + 1, ...`; defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpolate: Option<Interpolate>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthesizeResponse {
    /// Base64-encoded PNGs.
    pub images: Vec<String>,
    pub mix_echo: Vec<MixEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn no_bank() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no domain bank is loaded")
    }
}

impl From<DormError> for ApiError {
    fn from(e: DormError) -> Self {
        let status = match e {
            DormError::InvalidInput(_) | DormError::NotFound(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let mut app = Router::new()
        .route("/api/health", get(health))
        .route("/api/domains", get(domains))
        .route("/api/synthesize", post(synthesize));
    app = match &state.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(index)),
    };
    app.with_state(state).layer(SetResponseHeaderLayer::overriding(
        HeaderName::from_static(API_HEADER),
        HeaderValue::from_static(API_VERSION),
    ))
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

/// Run the server on a fresh runtime until it stops.
pub fn serve_blocking(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(state, addr))
}

async fn index() -> Html<&'static str> {
    Html(include_str!("../static/index.html"))
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(match &state.model {
        Some(m) => Health {
            status: "ok".into(),
            bank_hash: Some(m.bank_hash.clone()),
            domains_count: m.bank.len(),
        },
        None => Health {
            status: "no-bank".into(),
            bank_hash: None,
            domains_count: 0,
        },
    })
}

async fn domains(State(state): State<AppState>) -> std::result::Result<Json<DomainList>, ApiError> {
    let m = state.model.as_ref().ok_or_else(ApiError::no_bank)?;
    let mut domains: Vec<DomainInfo> = m
        .bank
        .modules()
        .map(|d| DomainInfo {
            name: d.domain_name.clone(),
            default_alpha: d.default_alpha,
            provenance: d.provenance.clone(),
        })
        .collect();
    domains.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Json(DomainList { domains }))
}

// The body is parsed by hand so that any malformed or mistyped JSON is a 422.
async fn synthesize(
    State(state): State<AppState>,
    body: Bytes,
) -> std::result::Result<Json<SynthesizeResponse>, ApiError> {
    let req: SynthesizeRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("malformed request: {e}")))?;
    let model = state.model.clone().ok_or_else(ApiError::no_bank)?;
    let latents = request_latents(&req, model.source.config.z_dim)?;
    let mix = MixSpec {
        entries: req.mix.clone(),
        layer_scale: None,
    };
    mix.validate(&model.bank)?;
    let images = tokio::task::spawn_blocking(move || render(&model, &mix, &latents))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(SynthesizeResponse {
        images,
        mix_echo: req.mix,
    }))
}

/// Latents a request asks for, in response order.
pub fn request_latents(req: &SynthesizeRequest, z_dim: usize) -> std::result::Result<Vec<LatentCode>, ApiError> {
    let bad = |msg: String| Err(ApiError::new(StatusCode::BAD_REQUEST, msg));
    if let Some(ip) = req.interpolate {
        if req.count.is_some_and(|c| c != 1) {
            return bad("count cannot be combined with interpolate".into());
        }
        if !(2..=MAX_IMAGES).contains(&ip.steps) {
            return bad(format!("interpolation steps must be in 2..={MAX_IMAGES}, got {}", ip.steps));
        }
        let (a, b) = (LatentCode::from_seed(req.seed, z_dim), LatentCode::from_seed(ip.seed2, z_dim));
        let last = (ip.steps - 1) as f32;
        return Ok((0..ip.steps).map(|i| a.lerp(&b, i as f32 / last)).collect());
    }
    let count = req.count.unwrap_or(1);
    if !(1..=MAX_IMAGES).contains(&count) {
        return bad(format!("count must be in 1..={MAX_IMAGES}, got {count}"));
    }
    Ok((0..count as u64)
        .map(|i| LatentCode::from_seed(req.seed.wrapping_add(i), z_dim))
        .collect())
}

fn render(model: &Model, mix: &MixSpec, latents: &[LatentCode]) -> Result<Vec<String>> {
    let gen = DormGenerator {
        source: &model.source,
        bank: &model.bank,
    };
    latents
        .iter()
        .map(|z| {
            let img = gen.generate(mix, z, None)?;
            Ok(BASE64.encode(img.to_png_bytes()?))
        })
        .collect()
}
