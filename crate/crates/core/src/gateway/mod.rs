//! Uniform access to chat, vision, and embedding backends.
//!
//! Every request goes through [`Gateway`], which
//!
//! * looks the request up in a content-addressed [`ResponseCache`] keyed on
//!   role, endpoint, model, decoding parameters and payload (images by
//!   content hash), so a warm cache replays a run without network traffic;
//! * serialises identical concurrent requests on a per-key lock so only one
//!   of them reaches the backend;
//! * caps simultaneous backend calls with a semaphore (`max_inflight`);
//! * retries transport failures with bounded exponential backoff.
//!
//! The actual wire work is done by a [`Transport`]: [`http::HttpTransport`]
//! speaks the common chat-completions / embeddings JSON shapes and
//! [`mock::MockTransport`] answers from a script.

pub mod cache;
pub mod http;
pub mod mock;

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::model::ImageRef;
use crate::Embedding;

pub use cache::{CacheEntry, ResponseCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Chat,
    Vision,
    TextEmbed,
    ImageEmbed,
}

/// How images are attached to vision and image-embedding requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ImageTransport {
    /// Base64 data URL in the request body.
    #[default]
    Inline,
    /// The image locator is passed as a URL; local files fall back to inline.
    Url,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Decoding {
    /// `None` leaves the backend default in place.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

fn default_timeout_ms() -> u64 {
    120_000
}

/// One model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub role: Role,
    /// Base URL (`http(s)://…`) or `mock:<script path>`.
    pub endpoint: String,
    pub model_id: String,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub image_transport: ImageTransport,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Expected embedding width, checked on every embedding reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
}

impl BackendProfile {
    pub fn new(role: Role, endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            role,
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            decoding: Decoding::default(),
            timeout_ms: default_timeout_ms(),
            image_transport: ImageTransport::default(),
            api_key_env: None,
            dimension: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if let Some(t) = self.decoding.temperature {
            if !(t >= 0.0) {
                return Err(GatewayError::InvalidProfile(format!(
                    "{}: temperature {t} must be >= 0",
                    self.model_id
                )));
            }
        }
        if self.endpoint.trim().is_empty() {
            return Err(GatewayError::InvalidProfile(format!("{}: empty endpoint", self.model_id)));
        }
        Ok(())
    }
}

/// Request body handed to a transport.
#[derive(Debug, Clone)]
pub enum Payload {
    Chat { prompt: String, image: Option<ImageRef> },
    Text(String),
    Image(ImageRef),
}

impl Payload {
    fn image(&self) -> Option<&ImageRef> {
        match self {
            Payload::Chat { image, .. } => image.as_ref(),
            Payload::Image(img) => Some(img),
            Payload::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply {
    Text(String),
    Vector(Embedding),
}

/// Payload of an embedding request.
#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Text(&'a str),
    Image(&'a ImageRef),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("image unreadable: {0}")]
    ImageUnreadable(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Network(_) | TransportError::Timeout => true,
            TransportError::Rejected { status, .. } => *status == 429 || *status >= 500,
            TransportError::ImageUnreadable(_) | TransportError::Protocol(_) => false,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend rejected request with status {status}: {body}")]
    BackendRejection { status: u16, body: String },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("image unreadable: {0}")]
    ImageUnreadable(String),
    #[error("profile role {role:?} cannot embed {payload}")]
    ModalityMismatch { role: Role, payload: &'static str },
    #[error("expected a {expected:?} profile, got {actual:?}")]
    RoleMismatch { expected: Role, actual: Role },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("invalid backend profile: {0}")]
    InvalidProfile(String),
}

/// Wire implementation behind the gateway.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, profile: &BackendProfile, payload: &Payload) -> Result<Reply, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `retry` (0-based), capped at `max_delay_ms`.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub network_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

#[derive(Default)]
struct Counters {
    network_calls: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
}

pub struct GatewayBuilder {
    transport: Arc<dyn Transport>,
    cache: ResponseCache,
    max_inflight: usize,
    retry: RetryPolicy,
    freeze: bool,
}

impl GatewayBuilder {
    pub fn cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn max_inflight(mut self, n: usize) -> Self {
        self.max_inflight = n.max(1);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Pin temperature 0 on every request.
    pub fn freeze(mut self, freeze: bool) -> Self {
        self.freeze = freeze;
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            transport: self.transport,
            cache: self.cache,
            limiter: Semaphore::new(self.max_inflight),
            key_locks: Mutex::new(HashMap::new()),
            retry: self.retry,
            freeze: self.freeze,
            counters: Counters::default(),
        }
    }
}

pub struct Gateway {
    transport: Arc<dyn Transport>,
    cache: ResponseCache,
    limiter: Semaphore,
    key_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    retry: RetryPolicy,
    freeze: bool,
    counters: Counters,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    role: Role,
    endpoint: &'a str,
    model_id: &'a str,
    decoding: &'a Decoding,
    kind: &'static str,
    prompt: Option<&'a str>,
    image: Option<String>,
    attempt: u32,
}

impl Gateway {
    pub fn builder(transport: Arc<dyn Transport>) -> GatewayBuilder {
        GatewayBuilder {
            transport,
            cache: ResponseCache::in_memory(),
            max_inflight: 4,
            retry: RetryPolicy::default(),
            freeze: false,
        }
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            network_calls: self.counters.network_calls.load(Ordering::SeqCst),
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.counters.cache_misses.load(Ordering::SeqCst),
        }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub async fn chat(&self, profile: &BackendProfile, prompt: &str) -> Result<String, GatewayError> {
        self.chat_attempt(profile, prompt, 0).await
    }

    /// Chat call for reprompt number `attempt`. Each attempt is cached under
    /// its own key so a reprompt reaches the backend while a replay still
    /// reproduces the whole sequence.
    pub async fn chat_attempt(
        &self,
        profile: &BackendProfile,
        prompt: &str,
        attempt: u32,
    ) -> Result<String, GatewayError> {
        expect_role(profile, Role::Chat)?;
        let payload = Payload::Chat {
            prompt: prompt.to_string(),
            image: None,
        };
        self.text_call(profile, payload, attempt).await
    }

    pub async fn describe(
        &self,
        profile: &BackendProfile,
        image: &ImageRef,
        prompt: &str,
    ) -> Result<String, GatewayError> {
        self.describe_attempt(profile, image, prompt, 0).await
    }

    pub async fn describe_attempt(
        &self,
        profile: &BackendProfile,
        image: &ImageRef,
        prompt: &str,
        attempt: u32,
    ) -> Result<String, GatewayError> {
        expect_role(profile, Role::Vision)?;
        let payload = Payload::Chat {
            prompt: prompt.to_string(),
            image: Some(image.clone()),
        };
        self.text_call(profile, payload, attempt).await
    }

    pub async fn embed(&self, profile: &BackendProfile, input: EmbedInput<'_>) -> Result<Embedding, GatewayError> {
        let payload = match (profile.role, input) {
            (Role::TextEmbed, EmbedInput::Text(t)) => Payload::Text(t.to_string()),
            (Role::ImageEmbed, EmbedInput::Image(img)) => Payload::Image(img.clone()),
            (role @ (Role::TextEmbed | Role::ImageEmbed), input) => {
                return Err(GatewayError::ModalityMismatch {
                    role,
                    payload: match input {
                        EmbedInput::Text(_) => "text",
                        EmbedInput::Image(_) => "an image",
                    },
                })
            }
            (actual, _) => {
                return Err(GatewayError::RoleMismatch {
                    expected: Role::TextEmbed,
                    actual,
                })
            }
        };
        match self.call(profile, payload, 0).await? {
            Reply::Vector(v) => {
                if v.is_empty() {
                    return Err(GatewayError::Protocol("empty embedding".into()));
                }
                if let Some(d) = profile.dimension {
                    if v.len() != d {
                        return Err(GatewayError::Protocol(format!(
                            "embedding has {} dimensions, profile expects {d}",
                            v.len()
                        )));
                    }
                }
                Ok(v)
            }
            Reply::Text(_) => Err(GatewayError::Protocol("expected an embedding, got text".into())),
        }
    }

    async fn text_call(&self, profile: &BackendProfile, payload: Payload, attempt: u32) -> Result<String, GatewayError> {
        match self.call(profile, payload, attempt).await? {
            Reply::Text(t) => Ok(t),
            Reply::Vector(_) => Err(GatewayError::Protocol("expected text, got an embedding".into())),
        }
    }

    fn effective_profile(&self, profile: &BackendProfile) -> BackendProfile {
        let mut p = profile.clone();
        if self.freeze {
            p.decoding.temperature = Some(0.0);
        }
        p
    }

    /// Cache key for a request: SHA-256 over its canonical JSON form.
    pub fn cache_key(&self, profile: &BackendProfile, payload: &Payload, attempt: u32) -> String {
        let profile = self.effective_profile(profile);
        key_for(&profile, payload, attempt)
    }

    fn key_lock(&self, key: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.key_locks.lock().expect("key lock table poisoned");
        locks.entry(key.to_string()).or_default().clone()
    }

    async fn call(&self, profile: &BackendProfile, payload: Payload, attempt: u32) -> Result<Reply, GatewayError> {
        profile.validate()?;
        let profile = self.effective_profile(profile);
        let key = key_for(&profile, &payload, attempt);

        let lock = self.key_lock(&key);
        let _guard = lock.lock().await;

        if let Some(hit) = self.cache.get(&key).map_err(GatewayError::Cache)? {
            self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.counters.cache_misses.fetch_add(1, Ordering::SeqCst);

        if let Some(img) = payload.image() {
            check_image(img)?;
        }

        let reply = self.send_with_retry(&profile, &payload).await?;
        self.cache.put(&key, &reply).map_err(GatewayError::Cache)?;
        Ok(reply)
    }

    async fn send_with_retry(&self, profile: &BackendProfile, payload: &Payload) -> Result<Reply, GatewayError> {
        let mut tries = 0u32;
        loop {
            tries += 1;
            let result = {
                let _permit = self.limiter.acquire().await.expect("limiter closed");
                self.counters.network_calls.fetch_add(1, Ordering::SeqCst);
                self.transport.send(profile, payload).await
            };
            match result {
                Ok(r) => return Ok(r),
                Err(e) if e.retryable() && tries <= self.retry.max_retries => {
                    tracing::debug!(model = %profile.model_id, error = %e, tries, "retrying backend call");
                    tokio::time::sleep(self.retry.delay(tries - 1)).await;
                }
                Err(e) => return Err(final_error(e, tries)),
            }
        }
    }
}

fn final_error(e: TransportError, attempts: u32) -> GatewayError {
    match e {
        TransportError::Network(message) => GatewayError::Transport { attempts, message },
        TransportError::Timeout => GatewayError::Timeout { attempts },
        TransportError::Rejected { status, body } => GatewayError::BackendRejection { status, body },
        TransportError::ImageUnreadable(m) => GatewayError::ImageUnreadable(m),
        TransportError::Protocol(m) => GatewayError::Protocol(m),
    }
}

fn expect_role(profile: &BackendProfile, expected: Role) -> Result<(), GatewayError> {
    if profile.role == expected {
        Ok(())
    } else {
        Err(GatewayError::RoleMismatch {
            expected,
            actual: profile.role,
        })
    }
}

fn key_for(profile: &BackendProfile, payload: &Payload, attempt: u32) -> String {
    let (kind, prompt, image) = match payload {
        Payload::Chat { prompt, image } => ("chat", Some(prompt.as_str()), image.as_ref()),
        Payload::Text(t) => ("embed-text", Some(t.as_str()), None),
        Payload::Image(img) => ("embed-image", None, Some(img)),
    };
    let material = KeyMaterial {
        role: profile.role,
        endpoint: &profile.endpoint,
        model_id: &profile.model_id,
        decoding: &profile.decoding,
        kind,
        prompt,
        image: image.map(|i| i.content_hash.to_hex()),
        attempt,
    };
    let bytes = serde_json::to_vec(&material).expect("key material serialises");
    hex::encode(Sha256::digest(&bytes))
}

/// Local images must exist and carry a recognisable image header.
/// URL images are left to the backend.
fn check_image(img: &ImageRef) -> Result<(), GatewayError> {
    if img.is_url() {
        return Ok(());
    }
    let bytes = img
        .read_bytes()
        .map_err(|e| GatewayError::ImageUnreadable(e.to_string()))?;
    image::ImageReader::new(Cursor::new(&bytes))
        .with_guessed_format()
        .map_err(|e| GatewayError::ImageUnreadable(format!("{}: {e}", img.locator)))?
        .into_dimensions()
        .map_err(|e| GatewayError::ImageUnreadable(format!("{}: {e}", img.locator)))?;
    Ok(())
}

/// Routes each profile to the transport for its endpoint scheme: `mock:`
/// endpoints to a registered [`mock::MockTransport`], everything else to
/// HTTP.
pub struct RoutingTransport {
    http: http::HttpTransport,
    mocks: HashMap<String, Arc<mock::MockTransport>>,
}

impl RoutingTransport {
    pub fn new(http: http::HttpTransport) -> Self {
        Self {
            http,
            mocks: HashMap::new(),
        }
    }

    pub fn with_mock(mut self, endpoint: impl Into<String>, mock: Arc<mock::MockTransport>) -> Self {
        self.mocks.insert(endpoint.into(), mock);
        self
    }

    pub fn mocks(&self) -> impl Iterator<Item = (&String, &Arc<mock::MockTransport>)> {
        self.mocks.iter()
    }
}

#[async_trait]
impl Transport for RoutingTransport {
    async fn send(&self, profile: &BackendProfile, payload: &Payload) -> Result<Reply, TransportError> {
        if profile.endpoint.starts_with("mock:") {
            match self.mocks.get(&profile.endpoint) {
                Some(m) => m.send(profile, payload).await,
                None => Err(TransportError::Rejected {
                    status: 404,
                    body: format!("no mock registered for {}", profile.endpoint),
                }),
            }
        } else {
            self.http.send(profile, payload).await
        }
    }
}
