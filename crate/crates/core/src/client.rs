//! Vision-chat model interface, HTTP client and reply parsing.
//!
//! Requests follow the chat-completions convention: one user message whose
//! content is the image parts (base64 data URLs) followed by a text part.
//! The reply text is read from `choices[0].message.content`.

use std::time::{Duration, Instant};

use base64::Engine;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::image_ops::EncodedImage;

#[derive(Debug, Clone, PartialEq)]
pub struct VisionQuery {
    pub images: Vec<EncodedImage>,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl VisionQuery {
    pub fn new(images: Vec<EncodedImage>, prompt: impl Into<String>) -> Self {
        Self {
            images,
            prompt: prompt.into(),
            max_tokens: 64,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReply {
    pub text: String,
    pub latency_ms: f64,
    pub raw: Value,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("Timeout: request exceeded the configured deadline")]
    Timeout,
    #[error("HttpError: status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("AuthError: endpoint rejected credentials (status {status})")]
    Auth { status: u16 },
    #[error("RetriesExhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ClientError> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("endpoint config: {0}")]
    Config(String),
    #[error("mock model: {0}")]
    Mock(String),
}

impl ClientError {
    fn retryable(&self) -> bool {
        match self {
            ClientError::Timeout | ClientError::Transport(_) => true,
            ClientError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Anything that can answer a vision query: the HTTP client, the in-process
/// mock, or a test double.
pub trait VisionModel: Send + Sync {
    fn query(&self, q: &VisionQuery) -> Result<ModelReply, ClientError>;
}

impl<T: VisionModel + ?Sized> VisionModel for &T {
    fn query(&self, q: &VisionQuery) -> Result<ModelReply, ClientError> {
        (**self).query(q)
    }
}

impl<T: VisionModel + ?Sized> VisionModel for std::sync::Arc<T> {
    fn query(&self, q: &VisionQuery) -> Result<ModelReply, ClientError> {
        (**self).query(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// e.g. `http://localhost:8000/v1`; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env_var: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub concurrent_request_limit: usize,
    pub initial_backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "default".into(),
            api_key_env_var: "OPENAI_API_KEY".into(),
            timeout_s: 60.0,
            max_retries: 1,
            concurrent_request_limit: 8,
            initial_backoff_ms: 500,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpClient {
    cfg: EndpointConfig,
    url: String,
    agent: ureq::Agent,
    api_key: Option<String>,
    gate: Gate,
}

impl HttpClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ClientError> {
        let base = cfg.base_url.trim_end_matches('/');
        let uri: ureq::http::Uri = base.parse().map_err(|e| ClientError::Config(format!("base_url {base:?}: {e}")))?;
        if !matches!(uri.scheme_str(), Some("http") | Some("https")) || uri.host().is_none() {
            return Err(ClientError::Config(format!("base_url {base:?} is not an http(s) URL")));
        }
        if cfg.timeout_s.is_nan() || cfg.timeout_s <= 0.0 {
            return Err(ClientError::Config("timeout_s must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&cfg.api_key_env_var).ok().filter(|k| !k.is_empty());
        Ok(Self {
            url: format!("{base}/chat/completions"),
            gate: Gate::new(cfg.concurrent_request_limit),
            cfg,
            agent,
            api_key,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn attempt(&self, body: &Value) -> Result<Value, ClientError> {
        let _permit = self.gate.acquire();
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| ClientError::BadResponse(e.to_string())),
            401 | 403 => Err(ClientError::Auth { status }),
            _ => Err(ClientError::Http { status, body: text }),
        }
    }
}

fn map_transport(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::Timeout(_) => ClientError::Timeout,
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            ClientError::Timeout
        }
        other => ClientError::Transport(other.to_string()),
    }
}

/// Chat-completions request body for `q`.
pub fn request_body(model: &str, q: &VisionQuery) -> Value {
    let mut content: Vec<Value> = q
        .images
        .iter()
        .map(|img| {
            let b64 = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
            json!({"type": "image_url", "image_url": {"url": format!("data:{};base64,{b64}", img.media_type)}})
        })
        .collect();
    content.push(json!({"type": "text", "text": q.prompt}));
    json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "max_tokens": q.max_tokens,
        "temperature": q.temperature,
    })
}

/// Pulls the assistant text out of a chat-completions response.
pub fn reply_text(raw: &Value) -> Result<String, ClientError> {
    let content = raw
        .pointer("/choices/0/message/content")
        .ok_or_else(|| ClientError::BadResponse("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        // some servers return content parts
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        Value::Null => Ok(String::new()),
        other => Err(ClientError::BadResponse(format!("unexpected content {other}"))),
    }
}

/// Decodes a `data:<media>;base64,<payload>` URL.
pub fn decode_data_url(url: &str) -> Result<EncodedImage, ClientError> {
    let rest = url
        .strip_prefix("data:")
        .ok_or_else(|| ClientError::InvalidQuery("image url is not a data URL".into()))?;
    let (media, payload) = rest
        .split_once(";base64,")
        .ok_or_else(|| ClientError::InvalidQuery("data URL is not base64".into()))?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload)
        .map_err(|e| ClientError::InvalidQuery(format!("bad base64: {e}")))?;
    Ok(EncodedImage {
        bytes,
        media_type: media.to_string(),
    })
}

/// Inverse of [`request_body`].
pub fn parse_request_body(body: &Value) -> Result<VisionQuery, ClientError> {
    let content = body
        .pointer("/messages/0/content")
        .and_then(Value::as_array)
        .ok_or_else(|| ClientError::InvalidQuery("missing messages[0].content array".into()))?;
    let mut images = Vec::new();
    let mut prompt = String::new();
    for part in content {
        match part.get("type").and_then(Value::as_str) {
            Some("image_url") => {
                let url = part
                    .pointer("/image_url/url")
                    .and_then(Value::as_str)
                    .ok_or_else(|| ClientError::InvalidQuery("image part without url".into()))?;
                images.push(decode_data_url(url)?);
            }
            Some("text") => prompt.push_str(part.get("text").and_then(Value::as_str).unwrap_or_default()),
            _ => {}
        }
    }
    Ok(VisionQuery {
        images,
        prompt,
        max_tokens: body.get("max_tokens").and_then(Value::as_u64).unwrap_or(64) as u32,
        temperature: body.get("temperature").and_then(Value::as_f64).unwrap_or(0.0),
    })
}

impl VisionModel for HttpClient {
    fn query(&self, q: &VisionQuery) -> Result<ModelReply, ClientError> {
        if q.images.is_empty() {
            return Err(ClientError::InvalidQuery("a query needs at least one image".into()));
        }
        let body = request_body(&self.cfg.model_name, q);
        let attempts = self.cfg.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.cfg.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let start = Instant::now();
            match self.attempt(&body) {
                Ok(raw) => {
                    let text = reply_text(&raw)?;
                    return Ok(ModelReply {
                        text,
                        latency_ms: start.elapsed().as_secs_f64() * 1e3,
                        raw,
                    });
                }
                Err(e) if e.retryable() => {
                    log::debug!("attempt {} of {attempts} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        let last = last.expect("at least one attempt");
        if attempts == 1 {
            Err(last)
        } else {
            Err(ClientError::RetriesExhausted {
                attempts,
                last: Box::new(last),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountPick {
    /// First integer in the reply; matches the trained "a photo of N obj" shape.
    #[default]
    First,
    /// Last integer; for chatty replies that restate the question first.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("NoCountFound: reply contains no integer")]
pub struct NoCountFound;

pub fn parse_count(text: &str) -> Result<u64, NoCountFound> {
    parse_count_with(text, CountPick::First)
}

pub fn parse_count_with(text: &str, pick: CountPick) -> Result<u64, NoCountFound> {
    let mut tokens = integer_tokens(text);
    match pick {
        CountPick::First => tokens.next(),
        CountPick::Last => tokens.last(),
    }
    .ok_or(NoCountFound)
}

/// Non-negative integer tokens, with `,ddd` thousands groups folded in.
/// Values beyond `u64::MAX` saturate.
fn integer_tokens(text: &str) -> impl Iterator<Item = u64> + '_ {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() && !bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == bytes.len() {
            return None;
        }
        let mut value: u64 = 0;
        let mut push = |d: u8| value = value.saturating_mul(10).saturating_add((d - b'0') as u64);
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            push(bytes[i]);
            i += 1;
        }
        loop {
            let group = bytes.get(i..i + 4);
            let is_group = matches!(group, Some([b',', a, b, c]) if a.is_ascii_digit() && b.is_ascii_digit() && c.is_ascii_digit())
                && !bytes.get(i + 4).is_some_and(u8::is_ascii_digit);
            if !is_group {
                break;
            }
            for k in 1..4 {
                push(bytes[i + k]);
            }
            i += 4;
        }
        Some(value)
    })
}
