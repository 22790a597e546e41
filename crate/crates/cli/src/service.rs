//! HTTP inference service: `POST /api/generate` and `GET /api/health`.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use title_forge::corpus::Language;
use title_forge::decoding::{generate_titles, BeamConfig, GeneratedTitle};
use title_forge::model::Seq2Seq;
use title_forge::tokenizer::{build_model_input, SubwordVocabulary};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

/// Joint cap on description and code, in bytes.
pub const MAX_INPUT_BYTES: usize = 64 * 1024;
/// Cap on the raw request body; JSON escaping can inflate text several times.
pub const MAX_BODY_BYTES: usize = 1024 * 1024;
pub const MAX_BEAM_WIDTH: usize = 64;
pub const DEFAULT_NUM_TITLES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub language: Language,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub code: String,
    pub beam_width: usize,
    pub num_titles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub titles: Vec<GeneratedTitle>,
    pub model_id: String,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub model_id: Option<String>,
    /// Seconds since the service started.
    pub uptime: f64,
    pub ready: bool,
}

/// Error body: a message and, for validation failures, the offending field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, field: Option<&str>, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                field: field.map(str::to_string),
            },
        }
    }

    fn field(field: &str, error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, Some(field), error)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub struct LoadedModel {
    pub model: Seq2Seq<f32>,
    pub vocab: SubwordVocabulary,
    pub model_id: String,
}

struct Inner {
    loaded: OnceLock<Arc<LoadedModel>>,
    started: Instant,
    beam_default: usize,
    workers: Arc<Semaphore>,
}

/// Shared service state. The model slot is filled once; until then
/// generation answers 503 and health reports `ready: false`.
#[derive(Clone)]
pub struct ServiceState {
    inner: Arc<Inner>,
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl ServiceState {
    pub fn new(beam_default: usize, workers: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                loaded: OnceLock::new(),
                started: Instant::now(),
                beam_default: beam_default.max(1),
                workers: Arc::new(Semaphore::new(workers.max(1))),
            }),
        }
    }

    /// Installs the model. Later calls are ignored.
    pub fn install(&self, model: Seq2Seq<f32>, vocab: SubwordVocabulary) {
        let model_id = model.model_id();
        let _ = self.inner.loaded.set(Arc::new(LoadedModel { model, vocab, model_id }));
    }

    pub fn loaded(&self) -> Option<Arc<LoadedModel>> {
        self.inner.loaded.get().cloned()
    }

    pub fn beam_default(&self) -> usize {
        self.inner.beam_default
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/api/generate", post(generate))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health(State(state): State<ServiceState>) -> Json<HealthResponse> {
    let loaded = state.loaded();
    Json(HealthResponse {
        model_id: loaded.as_ref().map(|l| l.model_id.clone()),
        uptime: state.inner.started.elapsed().as_secs_f64(),
        ready: loaded.is_some(),
    })
}

fn optional_string(obj: &Map<String, Value>, key: &str) -> Result<String, ApiError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ApiError::field(key, format!("{key} must be a string"))),
    }
}

fn optional_count(obj: &Map<String, Value>, key: &str) -> Result<Option<usize>, ApiError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_u64() {
            Some(n) if n >= 1 => Ok(Some(usize::try_from(n).unwrap_or(usize::MAX))),
            _ => Err(ApiError::field(key, format!("{key} must be an integer ≥ 1"))),
        },
    }
}

/// Parses and validates a request body, filling defaults.
pub fn parse_request(body: &[u8], beam_default: usize) -> Result<GenerateRequest, ApiError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, None, format!("invalid JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, None, "request body must be a JSON object"));
    };
    const FIELDS: [&str; 5] = ["language", "description", "code", "beam_width", "num_titles"];
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(ApiError::field(k, format!("unknown field {k}")));
    }
    let language = match obj.get("language") {
        None | Some(Value::Null) => return Err(ApiError::field("language", "language is required")),
        Some(v) => serde_json::from_value::<Language>(v.clone()).map_err(|_| {
            ApiError::field("language", "language must be one of java, csharp, python, javascript")
        })?,
    };
    let description = optional_string(&obj, "description")?;
    let code = optional_string(&obj, "code")?;
    if description.trim().is_empty() && code.trim().is_empty() {
        return Err(ApiError::field("description", "empty input"));
    }
    if description.len() + code.len() > MAX_INPUT_BYTES {
        return Err(ApiError::field(
            "description",
            format!("description and code together exceed {MAX_INPUT_BYTES} bytes"),
        ));
    }
    let beam_width = optional_count(&obj, "beam_width")?.unwrap_or(beam_default);
    if beam_width > MAX_BEAM_WIDTH {
        return Err(ApiError::field("beam_width", format!("beam_width must be at most {MAX_BEAM_WIDTH}")));
    }
    let num_titles = optional_count(&obj, "num_titles")?.unwrap_or(DEFAULT_NUM_TITLES.min(beam_width));
    if num_titles > beam_width {
        return Err(ApiError::field("num_titles", "num_titles must not exceed beam_width"));
    }
    Ok(GenerateRequest {
        language,
        description,
        code,
        beam_width,
        num_titles,
    })
}

/// Runs one request against a loaded model on the calling thread.
pub fn run_generate(loaded: &LoadedModel, req: &GenerateRequest) -> Result<Vec<GeneratedTitle>, ApiError> {
    let max_len = loaded.model.config().max_encoder_len;
    let input = build_model_input(&loaded.vocab, req.language, &req.description, &req.code, max_len)
        .map_err(|e| ApiError::field("description", e.to_string()))?;
    generate_titles(&loaded.model, &loaded.vocab, &input, &BeamConfig::with_width(req.beam_width), req.num_titles)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))
}

async fn generate(State(state): State<ServiceState>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let start = Instant::now();
    let Some(loaded) = state.loaded() else {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, None, "model not loaded"));
    };
    let req = parse_request(&body, state.beam_default())?;
    let permit = state
        .inner
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, None, "worker pool closed"))?;
    let worker_model = loaded.clone();
    let titles = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        run_generate(&worker_model, &req)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, format!("decoder failed: {e}")))??;
    Ok(Json(GenerateResponse {
        titles,
        model_id: loaded.model_id.clone(),
        elapsed_ms: u64::try_from(start.elapsed().as_millis()).unwrap_or(u64::MAX),
    }))
}
