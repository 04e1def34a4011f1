//! HTTP front end for synthesis.
//!
//! `POST /v1/synthesize` takes a JSON body with a base64 PNG sketch and
//! texture and color patches and answers with a PNG. `GET /v1/health`
//! reports the loaded checkpoint.

mod dto;
mod stub;

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use texturegan::colorkit::RgbImage;
use texturegan::infer::{SynthesisRequest, Synthesizer};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use dto::{ColorPatchDto, SynthesizeDto, TexturePatchDto};
pub use stub::StubRenderer;

pub const TIMING_HEADER: &str = "x-synthesis-ms";
pub const RESOLUTION_HEADER: &str = "x-internal-resolution";
pub const DEFAULT_MAX_INFLIGHT: usize = 4;

/// Output of one render.
pub struct Rendered {
    pub image: RgbImage,
    pub internal_resolution: usize,
}

/// Something that turns a request into an image.
pub trait Backend: Send + Sync {
    fn checkpoint_id(&self) -> &str;
    fn resolution(&self) -> usize;
    fn render(&self, req: &SynthesisRequest) -> texturegan::Result<Rendered>;
}

impl Backend for Synthesizer {
    fn checkpoint_id(&self) -> &str {
        Synthesizer::checkpoint_id(self)
    }

    fn resolution(&self) -> usize {
        Synthesizer::resolution(self)
    }

    fn render(&self, req: &SynthesisRequest) -> texturegan::Result<Rendered> {
        let out = self.synthesize(req)?;
        Ok(Rendered {
            image: out.image,
            internal_resolution: out.internal_resolution,
        })
    }
}

#[derive(Clone)]
pub struct AppState {
    backend: Arc<OnceLock<Arc<dyn Backend>>>,
    inflight: Arc<Semaphore>,
}

impl AppState {
    /// A state whose backend is not loaded yet.
    pub fn loading(max_inflight: usize) -> Self {
        Self {
            backend: Arc::new(OnceLock::new()),
            inflight: Arc::new(Semaphore::new(max_inflight.max(1))),
        }
    }

    pub fn ready(backend: Arc<dyn Backend>, max_inflight: usize) -> Self {
        let state = Self::loading(max_inflight);
        state.install(backend);
        state
    }

    /// Sets the backend once; later calls are ignored.
    pub fn install(&self, backend: Arc<dyn Backend>) {
        let _ = self.backend.set(backend);
    }

    pub fn backend(&self) -> Option<&Arc<dyn Backend>> {
        self.backend.get()
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub checkpoint: Option<PathBuf>,
    pub port: u16,
    pub stub: bool,
    pub max_inflight: usize,
    /// Allowed CORS origin; `None` allows any.
    pub cors_origin: Option<String>,
}

pub fn router(state: AppState, cors_origin: Option<&str>) -> Router {
    let origin = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([
            header::HeaderName::from_static(TIMING_HEADER),
            header::HeaderName::from_static(RESOLUTION_HEADER),
        ]);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/synthesize", post(synthesize))
        .layer(cors)
        .with_state(state)
}

/// Binds the port, starts loading the model in the background and serves
/// until the process is stopped.
pub async fn serve(opts: ServeOptions) -> std::io::Result<()> {
    let state = AppState::loading(opts.max_inflight);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", opts.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    if opts.stub {
        state.install(Arc::new(StubRenderer::default()));
    } else {
        let path = opts
            .checkpoint
            .clone()
            .ok_or_else(|| std::io::Error::other("--checkpoint is required unless --stub is given"))?;
        let loader = state.clone();
        tokio::task::spawn_blocking(move || match Synthesizer::load(&path) {
            Ok(s) => {
                log::info!("loaded checkpoint {}", s.checkpoint_id());
                loader.install(Arc::new(s));
            }
            Err(e) => log::error!("failed to load {}: {e}", path.display()),
        });
    }
    axum::serve(listener, router(state, opts.cors_origin.as_deref())).await
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolution: Option<usize>,
}

async fn health(State(state): State<AppState>) -> Response {
    match state.backend() {
        Some(b) => Json(Health {
            status: "ok",
            checkpoint_id: Some(b.checkpoint_id()),
            resolution: Some(b.resolution()),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "loading",
                checkpoint_id: None,
                resolution: None,
            }),
        )
            .into_response(),
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into(), id: None })).into_response()
}

fn internal(e: impl std::fmt::Display) -> Response {
    let id = uuid::Uuid::new_v4().to_string();
    log::error!("request {id} failed: {e}");
    (
        StatusCode::INTERNAL_SERVER_ERROR,
        Json(ErrorBody {
            error: "synthesis failed".into(),
            id: Some(id),
        }),
    )
        .into_response()
}

async fn synthesize(State(state): State<AppState>, body: Bytes) -> Response {
    let Some(backend) = state.backend().cloned() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model is still loading");
    };
    let Ok(_permit) = state.inflight.clone().try_acquire_owned() else {
        return error(StatusCode::TOO_MANY_REQUESTS, "too many requests in flight");
    };
    let req = match dto::parse(&body) {
        Ok(req) => req,
        Err(e) => return e.into_response(),
    };
    if let Err(e) = req.validate() {
        return map_error(e);
    }
    let start = Instant::now();
    let result = tokio::task::spawn_blocking(move || backend.render(&req)).await;
    let rendered = match result {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => return map_error(e),
        Err(e) => return internal(e),
    };
    let png = match rendered.image.to_png_bytes() {
        Ok(png) => png,
        Err(e) => return internal(e),
    };
    let ms = format!("{:.3}", start.elapsed().as_secs_f64() * 1e3);
    (
        StatusCode::OK,
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static(TIMING_HEADER), ms),
            (
                header::HeaderName::from_static(RESOLUTION_HEADER),
                rendered.internal_resolution.to_string(),
            ),
        ],
        png,
    )
        .into_response()
}

fn map_error(e: texturegan::Error) -> Response {
    use texturegan::Error;
    match e {
        Error::Validation(m) => error(StatusCode::BAD_REQUEST, m),
        Error::Unsupported(m) => error(StatusCode::UNPROCESSABLE_ENTITY, m),
        other => internal(other),
    }
}
