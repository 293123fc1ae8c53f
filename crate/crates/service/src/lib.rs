//! JSON-over-HTTP front end for the structure editing loop: draw a code,
//! look at its structure and music, edit the structure, regenerate.
//!
//! Every handler is a thin wrapper over `poly_core::generate`; the only state
//! kept here is the per-session latent code and last result.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Json, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use poly_core::generate::{conditioned_generate, decode_latent, interpolate, latent_for_seed, GenerateOptions};
use poly_core::model::ChordVae;
use poly_core::pianoroll::PianorollJson;
use poly_core::{Pianoroll, StructureTensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(60 * 60);
pub const MAX_INTERPOLATION_STEPS: usize = 16;

const EMPTY_WARNING: &str = "structure has no active cells; the result is silent";

/// Server-side record of one editing session.
#[derive(Debug, Clone)]
pub struct Session {
    pub z: Vec<f64>,
    pub structure: StructureTensor,
    pub pianoroll: Pianoroll,
    pub created: Instant,
    pub last_used: Instant,
}

/// Shared state: the frozen model (if one was loaded) and live sessions.
pub struct AppState {
    model: Option<ChordVae<f64>>,
    checkpoint: Option<PathBuf>,
    options: GenerateOptions,
    idle_timeout: Duration,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(model: ChordVae<f64>, checkpoint: Option<PathBuf>) -> Self {
        AppState {
            model: Some(model),
            checkpoint,
            options: GenerateOptions::default(),
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    /// A server that answers health checks but refuses generation.
    pub fn without_model() -> Self {
        AppState {
            model: None,
            checkpoint: None,
            options: GenerateOptions::default(),
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_options(mut self, options: GenerateOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_idle_timeout(mut self, timeout: Duration) -> Self {
        self.idle_timeout = timeout;
        self
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    fn model(&self) -> Result<&ChordVae<f64>, ApiError> {
        self.model.as_ref().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_checkpoint", "no model checkpoint is loaded"))
    }

    fn prune(&self) {
        let now = Instant::now();
        let timeout = self.idle_timeout;
        self.sessions.lock().expect("session map").retain(|_, s| {
            // A session busy in another request is in use, so keep it.
            s.try_lock().map_or(true, |s| now.duration_since(s.last_used) < timeout)
        });
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.prune();
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}")))
    }
}

/// Error body: `{"error": {"code", "message"}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct SampleRequest {
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleResponse {
    pub session_id: String,
    pub seed: u64,
    pub structure: StructureTensor,
    pub pianoroll: PianorollJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct RegenerateRequest {
    pub session_id: String,
    /// Parsed by hand so shape errors get a precise 422.
    pub structure: Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegenerateResponse {
    pub pianoroll: PianorollJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct InterpolateRequest {
    pub seed_a: u64,
    pub seed_b: u64,
    pub steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub sequences: Vec<PianorollJson>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": if state.model.is_some() { "ok" } else { "no_checkpoint" },
        "checkpoint": state.checkpoint.as_ref().map(|p| p.display().to_string()),
        "config": state.model.as_ref().map(|m| m.config().clone()),
    }))
}

/// Model work is CPU bound, so it runs off the async workers.
async fn blocking<R: Send + 'static>(f: impl FnOnce() -> Result<R, ApiError> + Send + 'static) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn sample(State(state): State<Arc<AppState>>, body: Option<Json<SampleRequest>>) -> Result<Json<SampleResponse>, ApiError> {
    state.model()?;
    let seed = body.and_then(|b| b.0.seed).unwrap_or_else(rand::random);
    let st = state.clone();
    let generated = blocking(move || {
        let model = st.model()?;
        let z = latent_for_seed(model.d(), seed);
        decode_latent(model, &z, &st.options).map_err(ApiError::internal)
    })
    .await?;
    let now = Instant::now();
    let session_id = uuid::Uuid::new_v4().to_string();
    let response = SampleResponse {
        session_id: session_id.clone(),
        seed,
        structure: generated.structure.clone(),
        pianoroll: PianorollJson::from(&generated.pianoroll),
        warning: generated.empty_structure.then(|| EMPTY_WARNING.to_string()),
    };
    let session = Session { z: generated.z, structure: generated.structure, pianoroll: generated.pianoroll, created: now, last_used: now };
    state.prune();
    state.sessions.lock().expect("session map").insert(session_id, Arc::new(Mutex::new(session)));
    Ok(Json(response))
}

async fn regenerate(State(state): State<Arc<AppState>>, Json(req): Json<RegenerateRequest>) -> Result<Json<RegenerateResponse>, ApiError> {
    let n_bars = state.model()?.config().n_bars;
    let handle = state.session(&req.session_id)?;
    let structure: StructureTensor =
        serde_json::from_value(req.structure).map_err(|e| ApiError::unprocessable("malformed_structure", e.to_string()))?;
    if structure.n_bars() != n_bars {
        return Err(ApiError::unprocessable(
            "malformed_structure",
            format!("structure has {} bars, the model expects {n_bars}", structure.n_bars()),
        ));
    }
    let st = state.clone();
    blocking(move || {
        let model = st.model()?;
        // Holding the session lock for the whole request keeps concurrent
        // edits of one session from interleaving.
        let mut session = handle.lock().map_err(ApiError::internal)?;
        let out = conditioned_generate(model, &session.z, &structure, &st.options).map_err(ApiError::internal)?;
        session.structure = out.structure;
        session.pianoroll = out.pianoroll;
        session.last_used = Instant::now();
        if out.empty_structure {
            log::warn!("session {}: {EMPTY_WARNING}", req.session_id);
        }
        Ok(Json(RegenerateResponse {
            pianoroll: PianorollJson::from(&session.pianoroll),
            warning: out.empty_structure.then(|| EMPTY_WARNING.to_string()),
        }))
    })
    .await
}

async fn interpolate_handler(State(state): State<Arc<AppState>>, Json(req): Json<InterpolateRequest>) -> Result<Json<InterpolateResponse>, ApiError> {
    state.model()?;
    if !(2..=MAX_INTERPOLATION_STEPS).contains(&req.steps) {
        return Err(ApiError::unprocessable("bad_steps", format!("steps must be in 2..={MAX_INTERPOLATION_STEPS}, got {}", req.steps)));
    }
    let st = state.clone();
    blocking(move || {
        let model = st.model()?;
        let a = latent_for_seed(model.d(), req.seed_a);
        let b = latent_for_seed(model.d(), req.seed_b);
        let path = interpolate(model, &a, &b, req.steps, &st.options).map_err(ApiError::internal)?;
        Ok(Json(InterpolateResponse { sequences: path.iter().map(|g| PianorollJson::from(&g.pianoroll)).collect() }))
    })
    .await
}

/// All routes with permissive CORS so a UI served from another origin can
/// call them.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sample", post(sample))
        .route("/api/regenerate", post(regenerate))
        .route("/api/interpolate", post(interpolate_handler))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `0.0.0.0:port` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
