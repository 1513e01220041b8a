use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    /// Chat-completions JSON with base64 data-URL images.
    #[default]
    Openai,
    /// `{"model", "prompt", "images"}` in, `{"text"}` or `{"blocked": true}` out.
    Custom,
}

/// One model endpoint. Secrets are read from the environment variable named
/// by `auth_env`, never from the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub model_id: String,
    #[serde(default)]
    pub transport: Transport,
    pub base_url: String,
    /// Model name sent in the request body; defaults to `model_id`.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_max_ms")]
    pub backoff_max_ms: u64,
    /// Requests per minute; unlimited when absent.
    #[serde(default)]
    pub rate_limit_rpm: Option<f64>,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    /// Case-insensitive substrings that mark a response or error body as a
    /// safety refusal, in addition to the built-in block codes.
    #[serde(default)]
    pub refusal_markers: Vec<String>,
    #[serde(default)]
    pub open_weights: bool,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_backoff_max_ms() -> u64 {
    16_000
}
fn default_max_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("endpoint {model_id}: {message}")]
pub struct EndpointConfigError {
    pub model_id: String,
    pub message: String,
}

impl EndpointConfig {
    pub fn new(model_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            transport: Transport::Openai,
            base_url: base_url.into(),
            model: None,
            auth_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_max_ms: default_backoff_max_ms(),
            rate_limit_rpm: None,
            max_concurrency: default_max_concurrency(),
            refusal_markers: Vec::new(),
            open_weights: false,
            temperature: None,
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), EndpointConfigError> {
        let err = |message: &str| EndpointConfigError { model_id: self.model_id.clone(), message: message.to_owned() };
        if self.model_id.trim().is_empty() {
            return Err(err("model_id is empty"));
        }
        if self.max_concurrency == 0 {
            return Err(err("max_concurrency must be at least 1"));
        }
        if let Some(r) = self.rate_limit_rpm {
            if !(r > 0.0 && r.is_finite()) {
                return Err(err("rate_limit_rpm must be positive"));
            }
        }
        if self.timeout_ms == 0 {
            return Err(err("timeout_ms must be positive"));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(err("base_url must be http(s)"));
        }
        Ok(())
    }

    pub fn request_model(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.model_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_toml() {
        let cfg: EndpointConfig = toml::from_str(
            r#"
            model_id = "m1"
            base_url = "http://127.0.0.1:9000/v1"
            rate_limit_rpm = 120
            max_concurrency = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.max_retries, 3);
        assert_eq!(cfg.transport, Transport::Openai);
        assert!(cfg.validate().is_ok());
        let bad = EndpointConfig { max_concurrency: 0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
