//! Blocking client for `POST <base_url>/v1/chat/completions`.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatMessage, ContentPart, GenerationParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles after every retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub vision: bool,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// Log request and response bodies (never the auth header).
    pub trace: bool,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            vision: false,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(300),
            max_in_flight: 8,
            trace: false,
        }
    }
}

/// Counting semaphore capping concurrent requests.
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(n: usize) -> Self {
        InFlight {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let in_flight = InFlight::new(config.max_in_flight);
        RemoteBackend {
            config,
            agent,
            in_flight,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// Builds the JSON request body. Image parts become data URLs.
    pub fn request_body(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<Value, BackendError> {
        let wire: Vec<Value> = messages
            .iter()
            .map(encode_message)
            .collect::<Result<_, _>>()?;
        Ok(json!({
            "model": self.config.model,
            "messages": wire,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }))
    }

    fn post_once(&self, body: &str) -> Result<String, BackendError> {
        let _permit = self.in_flight.acquire();
        let mut request = self
            .agent
            .post(&self.endpoint())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if self.config.trace {
            log::info!(target: "mocoll::trace", "<- {} HTTP {status} {text}", self.config.model);
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        parse_completion(&text)
    }
}

fn encode_message(message: &ChatMessage) -> Result<Value, BackendError> {
    let text_only = message.content.iter().all(|p| matches!(p, ContentPart::Text(_)));
    let content = if text_only {
        Value::String(message.text_content())
    } else {
        Value::Array(
            message
                .content
                .iter()
                .map(|part| match part {
                    ContentPart::Text(t) => Ok(json!({"type": "text", "text": t})),
                    ContentPart::ImageRef(r) => {
                        Ok(json!({"type": "image_url", "image_url": {"url": image_url(r)?}}))
                    }
                })
                .collect::<Result<_, BackendError>>()?,
        )
    };
    Ok(json!({"role": message.role, "content": content}))
}

/// Data URL for a local file; remote URLs and existing data URLs pass through.
pub(crate) fn image_url(image_ref: &str) -> Result<String, BackendError> {
    if image_ref.starts_with("data:") || image_ref.starts_with("http://") || image_ref.starts_with("https://") {
        return Ok(image_ref.to_string());
    }
    let path = Path::new(image_ref);
    let bytes = std::fs::read(path).map_err(|e| BackendError::Image {
        path: image_ref.to_string(),
        reason: e.to_string(),
    })?;
    let mime = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

/// Extracts `choices[0].message.content`, accepting either a string or a list
/// of text parts.
pub(crate) fn parse_completion(body: &str) -> Result<String, BackendError> {
    let value: Value = serde_json::from_str(body).map_err(|_| BackendError::MissingContent)?;
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or(BackendError::MissingContent)?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            let texts: Vec<&str> = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            if texts.is_empty() {
                Err(BackendError::MissingContent)
            } else {
                Ok(texts.concat())
            }
        }
        _ => Err(BackendError::MissingContent),
    }
}

impl ChatBackend for RemoteBackend {
    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn supports_vision(&self) -> bool {
        self.config.vision
    }

    fn complete(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        let body = self.request_body(messages, params)?.to_string();
        if self.config.trace {
            let auth = if self.config.api_key.is_some() {
                " Authorization: Bearer <redacted>"
            } else {
                ""
            };
            log::info!(target: "mocoll::trace", "-> POST {}{auth} {body}", self.endpoint());
        }
        let mut retry = 0;
        loop {
            match self.post_once(&body) {
                Err(err) if err.is_transient() && retry < self.config.retry.max_retries => {
                    let delay = self.config.retry.delay_before_retry(retry);
                    log::warn!("{}: {err}; retrying in {delay:?}", self.config.model);
                    std::thread::sleep(delay);
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}
