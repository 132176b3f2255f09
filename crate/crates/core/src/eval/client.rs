//! OpenAI-compatible chat-completions client.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Exponential backoff: `initial_backoff_ms * 2^k`, capped at `max_backoff_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model_name: String,
    pub max_completion_tokens: Option<u64>,
    pub temperature: f64,
    pub nucleus_p: f64,
    pub max_parallel_requests: usize,
    pub retry: RetryPolicy,
    /// Name of the environment variable holding the bearer key.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            max_completion_tokens: None,
            temperature: 1.0,
            nucleus_p: 1.0,
            max_parallel_requests: 4,
            retry: RetryPolicy::default(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 600,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(format!("nucleus_p must be in (0, 1], got {}", self.nucleus_p));
        }
        if self.max_parallel_requests == 0 {
            return Err("max_parallel_requests must be at least 1".into());
        }
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return Err("base_url and model_name must be set".into());
        }
        Ok(())
    }

    pub fn chat_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub completion_tokens: u64,
    pub reasoning_tokens: Option<u64>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EndpointError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl EndpointError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EndpointError::Transport(_) => true,
            EndpointError::Status { code, .. } => *code == 408 || *code == 429 || *code >= 500,
            EndpointError::Malformed(_) => false,
        }
    }
}

pub struct ChatClient {
    config: EndpointConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl ChatClient {
    /// The key is read once from `config.api_key_env`; a missing variable
    /// means requests go out without an `Authorization` header.
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        ChatClient { config, agent, api_key }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "top_p": self.config.nucleus_p,
        });
        if let Some(max) = self.config.max_completion_tokens {
            body["max_completion_tokens"] = json!(max);
        }
        body
    }

    pub fn request_once(&self, prompt: &str) -> Result<Completion, EndpointError> {
        let mut req = self.agent.post(&self.config.chat_url());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(prompt))
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        if !(200..300).contains(&code) {
            let mut body = text;
            body.truncate(500);
            return Err(EndpointError::Status { code, body });
        }
        parse_chat_response(&text)
    }

    /// Sends with retries on transient failures. Returns the outcome and the
    /// number of attempts made.
    pub fn complete(&self, prompt: &str) -> (Result<Completion, EndpointError>, u32) {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.request_once(prompt) {
                Ok(c) => return (Ok(c), attempts),
                Err(e) if e.is_retryable() && attempts <= self.config.retry.max_retries => {
                    let delay = self.config.retry.backoff(attempts - 1);
                    log::warn!("request failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
                Err(e) => return (Err(e), attempts),
            }
        }
    }
}

pub fn parse_chat_response(text: &str) -> Result<Completion, EndpointError> {
    let v: Value = serde_json::from_str(text).map_err(|e| EndpointError::Malformed(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| EndpointError::Malformed("missing choices[0].message.content".into()))?;
    // Some providers send null content when the budget runs out.
    let text = content.as_str().unwrap_or("").to_string();
    let completion_tokens = v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0);
    let reasoning_tokens = v
        .pointer("/usage/completion_tokens_details/reasoning_tokens")
        .and_then(Value::as_u64);
    Ok(Completion {
        text,
        completion_tokens,
        reasoning_tokens,
    })
}
