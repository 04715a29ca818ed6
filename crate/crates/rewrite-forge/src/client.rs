//! Rate-limited, retrying client for a chat-completions HTTP endpoint.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, warn};
use reqwest::StatusCode;
use rewrite_forge_core::rewrite::ChatRequest;
use rewrite_forge_core::RetryPolicy;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::time::Instant;

pub const API_KEY_ENV: &str = "REWRITE_API_KEY";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transient failure after {attempts} attempts (last status: {})", last_status.map_or("none".to_string(), |s| s.to_string()))]
    Transient {
        last_status: Option<u16>,
        attempts: u32,
        message: String,
    },
    #[error("request rejected with status {status}: {body}")]
    Permanent { status: u16, body: String, attempts: u32 },
    #[error("malformed response: {detail}")]
    Malformed { detail: String, attempts: u32 },
    #[error("client configuration: {0}")]
    Config(String),
}

impl ClientError {
    pub fn attempts(&self) -> u32 {
        match self {
            ClientError::Transient { attempts, .. }
            | ClientError::Permanent { attempts, .. }
            | ClientError::Malformed { attempts, .. } => *attempts,
            ClientError::Config(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimit {
    pub max_in_flight: usize,
    pub requests_per_second: f64,
}

impl Default for RateLimit {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            requests_per_second: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub rate: RateLimit,
}

impl ClientConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            rate: RateLimit::default(),
        }
    }

    /// Picks the credential up from `REWRITE_API_KEY`.
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub content: String,
    pub attempts: u32,
}

/// One client may be shared by any number of tasks; the in-flight cap and the
/// request pacing apply across all of them.
pub struct ChatClient {
    http: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
    in_flight: Semaphore,
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl ChatClient {
    pub fn new(config: ClientConfig) -> Result<Arc<Self>, ClientError> {
        if config.rate.max_in_flight == 0 {
            return Err(ClientError::Config("max_in_flight must be positive".into()));
        }
        let rps = config.rate.requests_per_second;
        if !(rps.is_finite() && rps > 0.0) {
            return Err(ClientError::Config("requests_per_second must be positive".into()));
        }
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Arc::new(Self {
            http,
            endpoint: format!("{}/v1/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: config.api_key,
            in_flight: Semaphore::new(config.rate.max_in_flight),
            interval: Duration::from_secs_f64(1.0 / rps),
            next_slot: Mutex::new(None),
        }))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    async fn pace(&self) {
        let slot = {
            let mut next = self.next_slot.lock().expect("pacer lock poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        tokio::time::sleep_until(slot).await;
    }

    /// Sends `request`, retrying retryable statuses and network errors with
    /// exponential backoff. Returns the first choice's message content.
    pub async fn send_chat(&self, request: &ChatRequest, policy: &RetryPolicy) -> Result<Completion, ClientError> {
        policy.validate().map_err(|e| ClientError::Config(e.to_string()))?;
        request.validate().map_err(|e| ClientError::Config(e.to_string()))?;
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_output_tokens,
        });
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 1..=policy.max_attempts {
            match self.attempt(&body).await {
                Ok((status, text)) if status.is_success() => {
                    return parse_content(&text)
                        .map(|content| Completion {
                            content,
                            attempts: attempt,
                        })
                        .map_err(|detail| ClientError::Malformed {
                            detail,
                            attempts: attempt,
                        });
                }
                Ok((status, text)) => {
                    let code = status.as_u16();
                    if !policy.is_retryable(code) {
                        return Err(ClientError::Permanent {
                            status: code,
                            body: truncate(&text, 512),
                            attempts: attempt,
                        });
                    }
                    last_status = Some(code);
                    last_message = truncate(&text, 512);
                }
                Err(e) => {
                    last_message = e.to_string();
                }
            }
            if attempt < policy.max_attempts {
                let delay = policy.backoff_after(attempt);
                debug!("attempt {attempt} failed ({last_message}); retrying in {delay:?}");
                tokio::time::sleep(delay).await;
            }
        }
        warn!("giving up after {} attempts: {last_message}", policy.max_attempts);
        Err(ClientError::Transient {
            last_status,
            attempts: policy.max_attempts,
            message: last_message,
        })
    }

    async fn attempt(&self, body: &Value) -> Result<(StatusCode, String), reqwest::Error> {
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        self.pace().await;
        let mut req = self.http.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await?;
        let status = resp.status();
        let text = resp.text().await?;
        Ok((status, text))
    }
}

fn parse_content(body: &str) -> Result<String, String> {
    let value: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "missing choices[0].message.content".to_string())
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}
