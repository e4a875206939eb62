//! HTTP clients for remote model servers.
//!
//! Text generation speaks the OpenAI-compatible chat-completions protocol.
//! Images, captions and embeddings use small JSON endpoints:
//!
//! | endpoint | request | response |
//! | --- | --- | --- |
//! | `POST /generate` | `{prompt, width, height}` | `{image_b64, format}` |
//! | `POST /caption` | `{image_b64, question}` | `{caption}` |
//! | `POST /embed` | `{input, space}` | `{vector}` |

use std::collections::HashMap;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::Engine;
use parking_lot::Mutex;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::store::ImageStore;
use super::{
    BackendError, Captioner, Completion, EmbedInput, Embedder, EmbeddingVector, FinishReason, ImageGenerator, Space,
    TextGenerator,
};
use crate::plan::{GenerationParams, ImageHandle};

/// Transport errors and rate limits are retried with exponential backoff;
/// semantic refusals (other 4xx) are surfaced immediately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.attempts => {
                    tracing::warn!(attempt, error = %e, "retrying backend call");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Clone)]
struct Endpoint {
    client: Client,
    base_url: String,
    token: Option<String>,
    retry: RetryPolicy,
}

impl Endpoint {
    fn new(base_url: &str, token: Option<String>) -> Self {
        Endpoint {
            client: Client::builder().timeout(Duration::from_secs(300)).build().expect("http client"),
            base_url: base_url.trim_end_matches('/').to_string(),
            token,
            retry: RetryPolicy::default(),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        self.retry.run(|| {
            let mut req = self.client.post(&url).json(body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
            if status == StatusCode::TOO_MANY_REQUESTS {
                return Err(BackendError::RateLimited(text));
            }
            if status.is_server_error() {
                return Err(BackendError::Transport(format!("{status}: {text}")));
            }
            if !status.is_success() {
                return Err(BackendError::Refused { status: status.as_u16(), message: text });
            }
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))
        })
    }
}

fn str_field<'a>(v: &'a Value, pointer: &str) -> Result<&'a str, BackendError> {
    v.pointer(pointer)
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Malformed(format!("missing `{pointer}` in response")))
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

pub struct OpenAiTextGenerator {
    endpoint: Endpoint,
    model: String,
}

impl OpenAiTextGenerator {
    pub fn new(base_url: &str, model: impl Into<String>, token: Option<String>) -> Self {
        OpenAiTextGenerator { endpoint: Endpoint::new(base_url, token), model: model.into() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.retry = retry;
        self
    }
}

impl TextGenerator for OpenAiTextGenerator {
    fn id(&self) -> String {
        format!("openai-chat:{}", self.model)
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, BackendError> {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.endpoint.post("/v1/chat/completions", &body)?;
        let text = str_field(&resp, "/choices/0/message/content")?.to_string();
        let finish_reason = match resp.pointer("/choices/0/finish_reason").and_then(Value::as_str) {
            Some("length") => FinishReason::Length,
            _ if text.trim().is_empty() => FinishReason::Error,
            _ => FinishReason::Stop,
        };
        Ok(Completion { text, finish_reason })
    }
}

pub struct HttpImageGenerator {
    endpoint: Endpoint,
    store: Arc<ImageStore>,
}

impl HttpImageGenerator {
    pub fn new(base_url: &str, token: Option<String>, store: Arc<ImageStore>) -> Self {
        HttpImageGenerator { endpoint: Endpoint::new(base_url, token), store }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.retry = retry;
        self
    }
}

impl ImageGenerator for HttpImageGenerator {
    fn id(&self) -> String {
        format!("http-image:{}", self.endpoint.base_url)
    }

    fn generate(&self, prompt: &str, width: u32, height: u32) -> Result<ImageHandle, BackendError> {
        let resp = self.endpoint.post("/generate", &json!({"prompt": prompt, "width": width, "height": height}))?;
        let bytes = b64()
            .decode(str_field(&resp, "/image_b64")?)
            .map_err(|e| BackendError::Malformed(format!("image_b64: {e}")))?;
        self.store.put(&bytes)
    }

    fn store(&self) -> &Arc<ImageStore> {
        &self.store
    }
}

pub struct HttpCaptioner {
    endpoint: Endpoint,
    store: Arc<ImageStore>,
}

impl HttpCaptioner {
    pub fn new(base_url: &str, token: Option<String>, store: Arc<ImageStore>) -> Self {
        HttpCaptioner { endpoint: Endpoint::new(base_url, token), store }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.retry = retry;
        self
    }
}

impl Captioner for HttpCaptioner {
    fn id(&self) -> String {
        format!("http-caption:{}", self.endpoint.base_url)
    }

    fn caption(&self, image: &ImageHandle, question: &str) -> Result<String, BackendError> {
        let bytes = self.store.read_decodable(image)?;
        let resp =
            self.endpoint.post("/caption", &json!({"image_b64": b64().encode(bytes), "question": question}))?;
        Ok(str_field(&resp, "/caption")?.to_string())
    }
}

pub struct HttpEmbedder {
    endpoint: Endpoint,
    store: Arc<ImageStore>,
    dims: Mutex<HashMap<Space, usize>>,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, token: Option<String>, store: Arc<ImageStore>) -> Self {
        HttpEmbedder { endpoint: Endpoint::new(base_url, token), store, dims: Mutex::new(HashMap::new()) }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.retry = retry;
        self
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http-embed:{}", self.endpoint.base_url)
    }

    fn embed(&self, input: EmbedInput<'_>, space: Space) -> Result<EmbeddingVector, BackendError> {
        let input = match input {
            EmbedInput::Text(t) => t.to_string(),
            EmbedInput::Image(h) => b64().encode(self.store.read_decodable(h)?),
        };
        let resp = self.endpoint.post("/embed", &json!({"input": input, "space": space.as_str()}))?;
        let values: Vec<f64> = resp
            .get("vector")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Malformed("missing `vector` in response".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::Malformed("non-numeric vector entry".into())))
            .collect::<Result<_, _>>()?;
        // joint_text and joint_image must share one dimension
        let family = if space == Space::JointImage { Space::JointText } else { space };
        let mut dims = self.dims.lock();
        let expected = *dims.entry(family).or_insert(values.len());
        if expected != values.len() {
            return Err(BackendError::Malformed(format!(
                "{space} embedding has {} entries, expected {expected}",
                values.len()
            )));
        }
        Ok(EmbeddingVector { values, space })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn retries_transient_then_succeeds() {
        let tries = AtomicUsize::new(0);
        let policy = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) };
        let out = policy.run(|| {
            if tries.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(BackendError::RateLimited("slow down".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(out, Ok(7));
        assert_eq!(tries.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_cap() {
        let tries = AtomicUsize::new(0);
        let policy = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) };
        let out: Result<(), _> = policy.run(|| {
            tries.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Transport("down".into()))
        });
        assert!(out.is_err());
        assert_eq!(tries.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn refusals_are_not_retried() {
        let tries = AtomicUsize::new(0);
        let policy = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) };
        let out: Result<(), _> = policy.run(|| {
            tries.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Refused { status: 400, message: "content policy".into() })
        });
        assert!(matches!(out, Err(BackendError::Refused { .. })));
        assert_eq!(tries.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn default_policy() {
        let p = RetryPolicy::default();
        assert_eq!(p.attempts, 3);
        assert_eq!(p.base_delay, Duration::from_secs(1));
    }
}
