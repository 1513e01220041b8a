//! Scripted model server for tests and offline demos.
//!
//! The server recognises tasks by hashing the prompt text and attached
//! images, so it can answer with configurable accuracy without any
//! out-of-band task id. Profiles are selected by the request's model name.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::prompt::render_prompt;
use segbench_core::model::{Answer, MarkerColor};
use segbench_core::synth::wrong_answer;
use segbench_core::taskgen::{derive_seed, BundleError, LoadedBundle};
use segbench_core::templates::{TemplateError, TemplateSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockProfile {
    /// Share of known tasks answered correctly.
    pub accuracy: f64,
    /// Share of tasks answered with an HTTP 400 safety block.
    pub safety_rate: f64,
    /// Share of tasks answered with text holding no answer.
    pub unparseable_rate: f64,
    /// Share of tasks whose first attempt fails with HTTP 503.
    pub transient_failure_rate: f64,
    pub latency_ms: u64,
    /// When set, every request stalls this long (to trigger client timeouts).
    pub hang_ms: Option<u64>,
    /// Fixed reply text, overriding everything above.
    pub fixed_response: Option<String>,
    /// Fixed HTTP status with `fixed_body`, overriding everything above.
    pub fixed_status: Option<u16>,
    pub fixed_body: Option<String>,
}

impl Default for MockProfile {
    fn default() -> Self {
        Self {
            accuracy: 1.0,
            safety_rate: 0.0,
            unparseable_rate: 0.0,
            transient_failure_rate: 0.0,
            latency_ms: 0,
            hang_ms: None,
            fixed_response: None,
            fixed_status: None,
            fixed_body: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    pub default_profile: MockProfile,
    pub profiles: BTreeMap<String, MockProfile>,
}

#[derive(Debug, Clone)]
struct KnownTask {
    task_id: String,
    key: Answer,
}

/// Prompt-and-images digest to task.
#[derive(Debug, Clone, Default)]
pub struct MockIndex(HashMap<String, KnownTask>);

fn digest(text: &str, images: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    h.update((text.len() as u64).to_le_bytes());
    h.update(text.as_bytes());
    for img in images {
        h.update((img.len() as u64).to_le_bytes());
        h.update(img);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("bind: {0}")]
    Bind(std::io::Error),
}

impl MockIndex {
    pub fn from_bundle(bundle: &LoadedBundle, templates: &TemplateSet) -> Result<Self, MockError> {
        let mut map = HashMap::new();
        for t in &bundle.tasks {
            let prompt = render_prompt(t, templates)?;
            let images = prompt.attachments.iter().map(|id| bundle.asset_png(id)).collect::<Result<Vec<_>, _>>()?;
            map.insert(digest(&prompt.text, &images), KnownTask { task_id: t.task_id.clone(), key: t.answer_key.clone() });
        }
        Ok(Self(map))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Request counters, shared with the caller of [`spawn_mock`].
#[derive(Debug, Default)]
pub struct MockStats {
    pub requests: AtomicUsize,
    in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub unknown_tasks: AtomicUsize,
    starts: Mutex<BTreeMap<String, Vec<Instant>>>,
    attempts: Mutex<HashMap<(String, String), u32>>,
}

impl MockStats {
    /// Request arrival times per model.
    pub fn arrivals(&self, model: &str) -> Vec<Instant> {
        self.starts.lock().expect("stats lock").get(model).cloned().unwrap_or_default()
    }

    pub fn requests_for(&self, model: &str) -> usize {
        self.arrivals(model).len()
    }
}

struct InFlight<'a>(&'a MockStats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a MockStats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

struct AppState {
    config: MockConfig,
    index: MockIndex,
    stats: Arc<MockStats>,
}

fn unit(seed: u64, parts: &[&str]) -> f64 {
    (derive_seed(seed, parts) >> 11) as f64 / (1u64 << 53) as f64
}

fn styled(answer: &Answer, style: u64) -> String {
    let token = match answer {
        Answer::Choice(_) => answer.token().to_uppercase(),
        Answer::Color(MarkerColor::Red) => "red".into(),
        Answer::Color(MarkerColor::Green) => "green".into(),
        other => other.token(),
    };
    match (answer, style % 4) {
        (Answer::Choice(_), 0) => token,
        (Answer::Choice(_), 1) => format!("Answer: {token}"),
        (Answer::Choice(_), 2) => format!("The correct option is ({}).", token.to_lowercase()),
        (Answer::Choice(_), _) => format!("{token}) is the one that fits."),
        (Answer::Count(_), 0) | (_, 0) => token,
        (Answer::Count(n), 1) => format!("There are {n}."),
        (_, 1) => format!("Answer: {token}"),
        (_, 2) => format!("{}.", capitalize(&token)),
        (_, _) => format!("I would say {token}, based on the image."),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

enum Reply {
    Text(String),
    Blocked,
    Status(u16, String),
}

async fn decide(state: &AppState, model: &str, text: &str, images: &[Vec<u8>]) -> Reply {
    let stats = &state.stats;
    stats.requests.fetch_add(1, Ordering::SeqCst);
    stats.starts.lock().expect("stats lock").entry(model.to_owned()).or_default().push(Instant::now());
    let profile = state.config.profiles.get(model).unwrap_or(&state.config.default_profile);
    if let Some(ms) = profile.hang_ms {
        tokio::time::sleep(Duration::from_millis(ms)).await;
    }
    if profile.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(profile.latency_ms)).await;
    }
    if let Some(code) = profile.fixed_status {
        return Reply::Status(code, profile.fixed_body.clone().unwrap_or_default());
    }
    if let Some(t) = &profile.fixed_response {
        return Reply::Text(t.clone());
    }
    let Some(task) = state.index.0.get(&digest(text, images)) else {
        stats.unknown_tasks.fetch_add(1, Ordering::SeqCst);
        return Reply::Text("I am not sure.".into());
    };
    let seed = state.config.seed;
    let id = task.task_id.as_str();
    let attempt = {
        let mut attempts = stats.attempts.lock().expect("stats lock");
        let a = attempts.entry((model.to_owned(), id.to_owned())).or_default();
        *a += 1;
        *a
    };
    if attempt == 1 && unit(seed, &[model, id, "transient"]) < profile.transient_failure_rate {
        return Reply::Status(503, r#"{"error":{"message":"overloaded"}}"#.into());
    }
    if unit(seed, &[model, id, "safety"]) < profile.safety_rate {
        return Reply::Blocked;
    }
    if unit(seed, &[model, id, "unparseable"]) < profile.unparseable_rate {
        return Reply::Text("I cannot tell from this image.".into());
    }
    let answer = if unit(seed, &[model, id, "correct"]) < profile.accuracy {
        task.key.clone()
    } else {
        wrong_answer(&task.key, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[model, id, "wrong"])))
    };
    Reply::Text(styled(&answer, derive_seed(seed, &[model, id, "style"])))
}

fn decode_images(urls: impl Iterator<Item = String>) -> Vec<Vec<u8>> {
    urls.filter_map(|u| {
        let b64 = u.rsplit_once(',').map(|(_, b)| b.to_owned()).unwrap_or(u);
        base64::engine::general_purpose::STANDARD.decode(b64).ok()
    })
    .collect()
}

async fn chat(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&state.stats);
    let model = body["model"].as_str().unwrap_or_default().to_owned();
    let content = body["messages"][0]["content"].as_array().cloned().unwrap_or_default();
    let text: String = content.iter().filter_map(|c| c["text"].as_str()).collect::<Vec<_>>().join("");
    let images = decode_images(content.iter().filter_map(|c| c["image_url"]["url"].as_str().map(str::to_owned)));
    match decide(&state, &model, &text, &images).await {
        Reply::Text(t) => Json(json!({
            "id": "mock", "object": "chat.completion", "model": model,
            "choices": [{"index": 0, "message": {"role": "assistant", "content": t}, "finish_reason": "stop"}],
        }))
        .into_response(),
        Reply::Blocked => (
            StatusCode::BAD_REQUEST,
            Json(json!({"error": {"code": "content_filter", "message": "The response was blocked by the safety system."}})),
        )
            .into_response(),
        Reply::Status(code, body) => {
            (StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), body).into_response()
        }
    }
}

async fn custom(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&state.stats);
    let model = body["model"].as_str().unwrap_or_default().to_owned();
    let text = body["prompt"].as_str().unwrap_or_default().to_owned();
    let images = decode_images(body["images"].as_array().into_iter().flatten().filter_map(|v| v.as_str().map(str::to_owned)));
    match decide(&state, &model, &text, &images).await {
        Reply::Text(t) => Json(json!({"text": t})).into_response(),
        Reply::Blocked => Json(json!({"blocked": true})).into_response(),
        Reply::Status(code, body) => {
            (StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), body).into_response()
        }
    }
}

async fn stats_handler(State(state): State<Arc<AppState>>) -> Json<Value> {
    let s = &state.stats;
    Json(json!({
        "requests": s.requests.load(Ordering::SeqCst),
        "max_in_flight": s.max_in_flight.load(Ordering::SeqCst),
        "unknown_tasks": s.unknown_tasks.load(Ordering::SeqCst),
    }))
}

fn router(config: MockConfig, index: MockIndex, stats: Arc<MockStats>) -> Router {
    let state = Arc::new(AppState { config, index, stats });
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/custom", post(custom))
        .route("/stats", get(stats_handler))
        .with_state(state)
}

/// A running mock server. OpenAI-style clients use `{base_url}/v1`.
pub struct MockServer {
    pub addr: SocketAddr,
    pub stats: Arc<MockStats>,
    handle: tokio::task::JoinHandle<()>,
}

impl MockServer {
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn custom_url(&self) -> String {
        format!("http://{}/custom", self.addr)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

/// Starts the mock on `addr` (port 0 picks a free port).
pub async fn spawn_mock(addr: SocketAddr, config: MockConfig, index: MockIndex) -> Result<MockServer, MockError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(MockError::Bind)?;
    let addr = listener.local_addr().map_err(MockError::Bind)?;
    let stats = Arc::new(MockStats::default());
    let app = router(config, index, stats.clone());
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!("mock server stopped: {e}");
        }
    });
    Ok(MockServer { addr, stats, handle })
}

/// Answer text the mock would produce for `answer`, in every style.
pub fn response_styles(answer: &Answer) -> Vec<String> {
    (0..4).map(|s| styled(answer, s)).collect()
}
