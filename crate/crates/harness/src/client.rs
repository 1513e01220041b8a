//! One model query with retries, backoff, safety detection and rate limiting.

use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde_json::{json, Value};
use tokio::sync::Mutex;

use crate::config::{EndpointConfig, Transport};
use segbench_core::model::EvalStatus;

/// Finish reasons and error codes treated as safety blocks.
const BLOCK_CODES: [&str; 6] = ["content_filter", "safety", "content_policy_violation", "blocked", "prohibited_content", "recitation"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryOutcome {
    pub status: EvalStatus,
    /// Response text, or the last error/refusal body.
    pub raw: String,
    pub attempts: u32,
    pub latency_ms: u64,
}

/// Spaces request starts at least `60 / rpm` seconds apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(rpm: Option<f64>) -> Self {
        Self { interval: rpm.map(|r| Duration::from_secs_f64(60.0 / r)), next: Mutex::new(Instant::now()) }
    }

    pub async fn acquire(&self) {
        let Some(interval) = self.interval else { return };
        let slot = {
            let mut next = self.next.lock().await;
            let slot = (*next).max(Instant::now());
            *next = slot + interval;
            slot
        };
        tokio::time::sleep_until(slot.into()).await;
    }
}

enum Attempt {
    Text(String),
    Blocked(String),
    Retryable(String),
    Fatal(String),
}

fn is_block_code(v: &Value) -> bool {
    v.as_str().is_some_and(|s| BLOCK_CODES.contains(&s.to_ascii_lowercase().as_str()))
}

fn has_marker(text: &str, markers: &[String]) -> bool {
    let lower = text.to_lowercase();
    markers.iter().any(|m| !m.is_empty() && lower.contains(&m.to_lowercase()))
}

fn error_body_blocked(body: &Value) -> bool {
    let err = &body["error"];
    is_block_code(&err["code"]) || is_block_code(&err["type"]) || is_block_code(&err["status"]) || body["blocked"] == json!(true)
}

fn request_body(endpoint: &EndpointConfig, text: &str, images: &[Vec<u8>]) -> Value {
    let b64 = |png: &Vec<u8>| base64::engine::general_purpose::STANDARD.encode(png);
    match endpoint.transport {
        Transport::Openai => {
            let mut content = vec![json!({"type": "text", "text": text})];
            for img in images {
                content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{}", b64(img))}}));
            }
            let mut body = json!({
                "model": endpoint.request_model(),
                "messages": [{"role": "user", "content": content}],
                "temperature": endpoint.temperature.unwrap_or(0.0),
            });
            if let Some(m) = endpoint.max_tokens {
                body["max_tokens"] = json!(m);
            }
            body
        }
        Transport::Custom => json!({
            "model": endpoint.request_model(),
            "prompt": text,
            "images": images.iter().map(b64).collect::<Vec<_>>(),
        }),
    }
}

fn url(endpoint: &EndpointConfig) -> String {
    match endpoint.transport {
        Transport::Openai => format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/')),
        Transport::Custom => endpoint.base_url.clone(),
    }
}

fn read_success(endpoint: &EndpointConfig, body: &Value) -> Attempt {
    match endpoint.transport {
        Transport::Openai => {
            let choice = &body["choices"][0];
            if is_block_code(&choice["finish_reason"]) {
                return Attempt::Blocked(body.to_string());
            }
            match choice["message"]["content"].as_str() {
                Some(text) => Attempt::Text(text.to_owned()),
                None if choice["message"]["refusal"].is_string() => Attempt::Blocked(body.to_string()),
                None => Attempt::Fatal(format!("no message content in response: {body}")),
            }
        }
        Transport::Custom => {
            if body["blocked"] == json!(true) {
                return Attempt::Blocked(body.to_string());
            }
            match body["text"].as_str() {
                Some(text) => Attempt::Text(text.to_owned()),
                None => Attempt::Fatal(format!("no text in response: {body}")),
            }
        }
    }
}

async fn attempt(client: &reqwest::Client, endpoint: &EndpointConfig, body: &Value) -> Attempt {
    let mut req = client.post(url(endpoint)).timeout(Duration::from_millis(endpoint.timeout_ms)).json(body);
    if let Some(var) = &endpoint.auth_env {
        if let Ok(key) = std::env::var(var) {
            req = req.bearer_auth(key);
        }
    }
    let resp = match req.send().await {
        Ok(r) => r,
        Err(e) => return Attempt::Retryable(format!("request failed: {e}")),
    };
    let status = resp.status();
    let text = match resp.text().await {
        Ok(t) => t,
        Err(e) => return Attempt::Retryable(format!("reading body failed: {e}")),
    };
    let json: Option<Value> = serde_json::from_str(&text).ok();
    if status.is_success() {
        let Some(body) = json else { return Attempt::Fatal(format!("non-JSON response: {text}")) };
        return match read_success(endpoint, &body) {
            Attempt::Text(t) if has_marker(&t, &endpoint.refusal_markers) => Attempt::Blocked(t),
            other => other,
        };
    }
    let blocked = json.as_ref().is_some_and(error_body_blocked) || has_marker(&text, &endpoint.refusal_markers);
    if blocked && (status.is_client_error()) {
        return Attempt::Blocked(text);
    }
    let msg = format!("HTTP {}: {text}", status.as_u16());
    if status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error() {
        Attempt::Retryable(msg)
    } else {
        Attempt::Fatal(msg)
    }
}

pub fn backoff_delay(endpoint: &EndpointConfig, retry: u32, rng: &mut impl Rng) -> Duration {
    let exp = endpoint.backoff_base_ms.saturating_mul(1u64 << retry.min(20)).min(endpoint.backoff_max_ms);
    Duration::from_millis((exp as f64 * rng.random_range(0.5..=1.0)) as u64)
}

/// Sends one prompt with its PNG attachments. Failures come back as
/// statuses; this never panics or aborts the run.
pub async fn query_model(
    client: &reqwest::Client,
    endpoint: &EndpointConfig,
    limiter: &RateLimiter,
    text: &str,
    images: &[Vec<u8>],
) -> QueryOutcome {
    let body = request_body(endpoint, text, images);
    let start = Instant::now();
    let mut attempts = 0;
    let (status, raw) = loop {
        limiter.acquire().await;
        attempts += 1;
        match attempt(client, endpoint, &body).await {
            Attempt::Text(t) => break (EvalStatus::Answered, t),
            Attempt::Blocked(b) => break (EvalStatus::UnansweredSafety, b),
            Attempt::Fatal(e) => break (EvalStatus::TransportError, e),
            Attempt::Retryable(e) => {
                if attempts > endpoint.max_retries {
                    break (EvalStatus::TransportError, e);
                }
                tracing::debug!(model = %endpoint.model_id, attempts, "retrying: {e}");
                let delay = backoff_delay(endpoint, attempts - 1, &mut rand::rng());
                tokio::time::sleep(delay).await;
            }
        }
    };
    QueryOutcome { status, raw, attempts, latency_ms: start.elapsed().as_millis() as u64 }
}
