//! HTTP service for interactive tuning of one loaded model.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use dlf_core::basenet::{stages_from, Stage};
use dlf_core::hypernet::fingerprint;
use dlf_core::model::network_input;
use dlf_core::operators::OperatorSpec;
use dlf_core::{ActivationCache, Error, Image, Model};
use dlf_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Largest accepted image side.
pub const MAX_SIDE: usize = 2048;
const BODY_LIMIT: usize = 64 << 20;

/// One uploaded image. The network input (image plus edge map) is kept for
/// full applies; prefix caches are built lazily, one per operator used in
/// cheap mode.
struct Session {
    input: Tensor<f32>,
    fingerprint: u64,
    caches: HashMap<String, ActivationCache<f32>>,
}

/// Shared service state: the model (absent until loaded) and the open
/// sessions, each behind its own lock.
#[derive(Default)]
pub struct AppState {
    model: RwLock<Option<Arc<Model>>>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

impl AppState {
    pub fn new(model: Option<Model>) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(model.map(Arc::new)),
            sessions: Mutex::default(),
        })
    }

    pub fn set_model(&self, model: Model) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }

    fn model(&self) -> Result<Arc<Model>, ApiError> {
        self.model.read().expect("model lock").clone().ok_or(ApiError::NotLoaded)
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions.lock().expect("session lock").get(id).cloned().ok_or(ApiError::UnknownSession)
    }
}

#[derive(Debug)]
enum ApiError {
    BadRequest(String),
    GammaOutOfRange(String),
    UnknownOperator(String),
    ImageTooLarge { height: usize, width: usize },
    UnknownSession,
    NotLoaded,
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter { name, .. } => ApiError::GammaOutOfRange(name),
            Error::UnknownOperator(name) => ApiError::UnknownOperator(name),
            Error::Contract(m) | Error::Dimension(m) => ApiError::BadRequest(m),
            Error::Image(e) => ApiError::BadRequest(format!("image: {e}")),
            e => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::BadRequest(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({"error": "bad_request", "message": m})),
            ApiError::GammaOutOfRange(p) => (StatusCode::BAD_REQUEST, json!({"error": "gamma_out_of_range", "param": p})),
            ApiError::UnknownOperator(n) => (StatusCode::BAD_REQUEST, json!({"error": "unknown_operator", "operator": n})),
            ApiError::ImageTooLarge { height, width } => (
                StatusCode::BAD_REQUEST,
                json!({"error": "image_too_large", "message": format!("{height}x{width} exceeds {MAX_SIDE}x{MAX_SIDE}")}),
            ),
            ApiError::UnknownSession => (StatusCode::NOT_FOUND, json!({"error": "unknown_session"})),
            ApiError::NotLoaded => (StatusCode::SERVICE_UNAVAILABLE, json!({"error": "model_not_loaded"})),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": "internal", "message": m})),
        };
        (status, Json(body)).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

fn encode(img: &Image) -> Result<String, ApiError> {
    Ok(STANDARD.encode(img.encode_png()?))
}

async fn operators(State(state): State<Arc<AppState>>) -> Result<Json<Vec<OperatorSpec>>, ApiError> {
    Ok(Json(state.model()?.codec.operators.clone()))
}

#[derive(Deserialize)]
struct CreateSession {
    image: String,
}

#[derive(Serialize)]
struct Created {
    session_id: String,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<Created>, ApiError> {
    let Json(body) = body?;
    let model = state.model()?;
    let bytes = STANDARD
        .decode(body.image.trim())
        .map_err(|e| ApiError::BadRequest(format!("image is not base64: {e}")))?;
    let session = blocking(move || {
        let image = Image::decode(&bytes)?;
        let (height, width) = (image.height(), image.width());
        if height > MAX_SIDE || width > MAX_SIDE {
            return Err(ApiError::ImageTooLarge { height, width });
        }
        model.net.base().check_input_size(height, width)?;
        let input = network_input(&image)?;
        Ok(Session {
            fingerprint: fingerprint(&input),
            input,
            caches: HashMap::new(),
        })
    })
    .await?;
    let id = format!("{:032x}", rand::thread_rng().gen::<u128>());
    state
        .sessions
        .lock()
        .expect("session lock")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(Created { session_id: id }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Cheap,
}

#[derive(Deserialize)]
struct ApplyRequest {
    operator: String,
    gamma: Vec<f64>,
    mode: Mode,
}

#[derive(Serialize)]
struct Applied {
    image: String,
    latency_ms: f64,
    layers_recomputed: usize,
    mode: Mode,
}

async fn apply(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<ApplyRequest>, JsonRejection>,
) -> Result<Json<Applied>, ApiError> {
    let Json(req) = body?;
    let model = state.model()?;
    let spec = model.codec.operator(&req.operator)?;
    if req.gamma.len() != spec.params.len() {
        return Err(ApiError::BadRequest(format!(
            "{} takes {} parameter(s), got {}",
            spec.name,
            spec.params.len(),
            req.gamma.len()
        )));
    }
    let gamma = model.gamma(&req.operator, &req.gamma)?.to_vec();
    let session = state.session(&id)?.lock_owned().await;
    blocking(move || {
        let mut session = session;
        let session = &mut *session;
        let start = Instant::now();
        let full = stages_from(model.net.base(), Stage::Conv(1));
        let (output, layers) = match req.mode {
            Mode::Full => (model.net.forward(&gamma, &session.input)?, full),
            Mode::Cheap => match session.caches.get(&req.operator) {
                Some(cache) => {
                    let out = model.net.cached_forward(cache, &gamma, session.fingerprint)?;
                    (out.output, out.layers_recomputed)
                }
                None => {
                    let cache = model.net.build_cache(&session.input)?;
                    let out = model.net.cached_forward(&cache, &gamma, session.fingerprint)?;
                    session.caches.insert(req.operator.clone(), cache);
                    (out.output, full)
                }
            },
        };
        let out = Image::from_tensor(&output, 0)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let image = encode(&out)?;
        Ok(Json(Applied {
            image,
            latency_ms,
            layers_recomputed: layers,
            mode: req.mode,
        }))
    })
    .await
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.sessions.lock().expect("session lock").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::UnknownSession),
    }
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/operators", get(operators))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/apply", post(apply))
        .route("/api/session/{id}", delete(delete_session))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}
