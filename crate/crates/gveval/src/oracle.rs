//! Chat-completion backends with retries, rate limiting, and a
//! content-addressed response cache.
//!
//! The [`Client`] wraps any [`Backend`] and owns the operational concerns:
//! transient failures are retried with exponential backoff and jitter, a
//! shared token bucket spaces requests across worker threads, and replies
//! are cached on disk keyed by a digest of the full request. Two backends
//! ship with the crate: [`LiveBackend`] speaks the OpenAI-style
//! `/chat/completions` protocol with image attachments and token
//! log-probabilities, and [`MockBackend`] replays scripted fixtures for
//! offline runs.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ImagePayload;

// ---------------------------------------------------------------------------
// Request / response types
// ---------------------------------------------------------------------------

/// One completion request, fully determining the cache identity.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub model_id: String,
    pub prompt_text: String,
    pub attachments: Vec<ImagePayload>,
    pub temperature: f64,
    pub top_k_logprobs: u32,
    pub max_output_tokens: u32,
}

impl BackendRequest {
    /// Hex sha256 over model id, prompt bytes, attachment digests,
    /// temperature, and the logprob depth. Fields are length-prefixed so
    /// adjacent fields cannot alias.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut field = |bytes: &[u8]| {
            hasher.update((bytes.len() as u64).to_be_bytes());
            hasher.update(bytes);
        };
        field(self.model_id.as_bytes());
        field(self.prompt_text.as_bytes());
        field(&(self.attachments.len() as u32).to_be_bytes());
        for attachment in &self.attachments {
            field(attachment.digest().as_bytes());
        }
        field(&self.temperature.to_bits().to_be_bytes());
        field(&self.top_k_logprobs.to_be_bytes());
        hex::encode(hasher.finalize())
    }
}

/// One generated token with its log-probability and the top alternatives
/// at that position, sorted most probable first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub logprob: f64,
    pub alternatives: Vec<(String, f64)>,
}

impl TokenRecord {
    /// Normalizes the alternative list: the realized token is inserted if
    /// the backend omitted it, and entries are sorted by descending
    /// log-probability.
    pub fn new(text: String, logprob: f64, mut alternatives: Vec<(String, f64)>) -> TokenRecord {
        if !alternatives.iter().any(|(t, _)| *t == text) {
            alternatives.push((text.clone(), logprob));
        }
        alternatives.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        TokenRecord {
            text,
            logprob,
            alternatives,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// A completed reply. When token records are present their texts
/// concatenate to exactly `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub tokens: Vec<TokenRecord>,
    pub usage: TokenUsage,
    /// Opaque transport notes (model snapshot, retry count, ...).
    #[serde(default)]
    pub backend_meta: String,
}

impl BackendResponse {
    pub fn tokens_match_text(&self) -> bool {
        if self.tokens.is_empty() {
            return true;
        }
        let mut joined = String::with_capacity(self.text.len());
        for t in &self.tokens {
            joined.push_str(&t.text);
        }
        joined == self.text
    }
}

/// Anything that can answer a completion request.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, OracleError>;
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited by backend")]
    RateLimited,
    #[error("rate limit persisted through {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("transport failure: {message}")]
    Transport { message: String, transient: bool },
    #[error("backend reply did not parse: {0}")]
    MalformedReply(String),
    #[error("fixture did not parse: {0}")]
    FixtureParse(String),
    #[error("mock backend has no response for request digest {0}")]
    UnknownRequest(String),
    #[error("cache blob unusable: {0}")]
    CacheCorrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl OracleError {
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            OracleError::RateLimited
                | OracleError::Transport {
                    transient: true,
                    ..
                }
        )
    }
}

// ---------------------------------------------------------------------------
// Retry and rate limiting
// ---------------------------------------------------------------------------

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay_ms: u64,
    pub max_delay_ms: u64,
    pub backoff_base: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_delay_ms: 500,
            max_delay_ms: 8_000,
            backoff_base: 2.0,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let base = self.initial_delay_ms as f64 * self.backoff_base.powi(attempt as i32);
        let capped = base.min(self.max_delay_ms as f64);
        let jitter = 0.5 + rand::random::<f64>();
        Duration::from_millis((capped * jitter) as u64)
    }
}

/// Token bucket shared by all worker threads of a run.
#[derive(Debug)]
pub struct RateLimiter {
    state: Mutex<BucketState>,
    capacity: f64,
    refill_per_sec: f64,
}

#[derive(Debug)]
struct BucketState {
    tokens: f64,
    last_refill: Instant,
}

impl RateLimiter {
    pub fn new(requests_per_sec: f64, burst: u32) -> RateLimiter {
        RateLimiter {
            state: Mutex::new(BucketState {
                tokens: burst as f64,
                last_refill: Instant::now(),
            }),
            capacity: burst as f64,
            refill_per_sec: requests_per_sec.max(0.001),
        }
    }

    /// Blocks the calling thread until a request token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let elapsed = state.last_refill.elapsed().as_secs_f64();
                state.tokens = (state.tokens + elapsed * self.refill_per_sec).min(self.capacity);
                state.last_refill = Instant::now();
                if state.tokens >= 1.0 {
                    state.tokens -= 1.0;
                    return;
                }
                (1.0 - state.tokens) / self.refill_per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait.min(0.25)));
        }
    }
}

// ---------------------------------------------------------------------------
// Response cache
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CacheBlob {
    request_digest: String,
    model_id: String,
    text: String,
    tokens: Vec<TokenRecord>,
    usage: TokenUsage,
    created_at: String,
}

/// One JSON blob per request digest, sharded by the first two hex chars.
/// Writes go through a temp file and rename, so readers never observe a
/// partial blob.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> ResponseCache {
        ResponseCache { root: root.into() }
    }

    fn blob_path(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[..2]).join(format!("{digest}.json"))
    }

    /// Looks a digest up; a corrupt blob counts as a miss and is reported
    /// through the log so the caller recomputes and replaces it.
    pub fn load(&self, digest: &str) -> Option<BackendResponse> {
        let path = self.blob_path(digest);
        let bytes = fs::read(&path).ok()?;
        match Self::decode(digest, &bytes) {
            Ok(response) => Some(response),
            Err(err) => {
                log::warn!("cache blob {} failed validation: {err}", path.display());
                None
            }
        }
    }

    fn decode(digest: &str, bytes: &[u8]) -> Result<BackendResponse, OracleError> {
        let blob: CacheBlob =
            serde_json::from_slice(bytes).map_err(|e| OracleError::CacheCorrupt(e.to_string()))?;
        if blob.request_digest != digest {
            return Err(OracleError::CacheCorrupt(format!(
                "stored digest {} does not match key",
                blob.request_digest
            )));
        }
        let response = BackendResponse {
            text: blob.text,
            tokens: blob.tokens,
            usage: blob.usage,
            backend_meta: String::new(),
        };
        if !response.tokens_match_text() {
            return Err(OracleError::CacheCorrupt(
                "token texts do not concatenate to the reply text".to_string(),
            ));
        }
        Ok(response)
    }

    pub fn store(
        &self,
        digest: &str,
        model_id: &str,
        response: &BackendResponse,
    ) -> Result<(), OracleError> {
        let blob = CacheBlob {
            request_digest: digest.to_string(),
            model_id: model_id.to_string(),
            text: response.text.clone(),
            tokens: response.tokens.clone(),
            usage: response.usage,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.blob_path(digest);
        let dir = path
            .parent()
            .expect("blob path always has a shard directory");
        fs::create_dir_all(dir)?;
        let encoded = serde_json::to_vec_pretty(&blob)
            .map_err(|e| OracleError::CacheCorrupt(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&encoded)?;
        tmp.persist(&path).map_err(|e| OracleError::Io(e.error))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Client wrapper
// ---------------------------------------------------------------------------

/// A backend plus retries, optional rate limiting, and an optional cache.
pub struct Client {
    backend: Box<dyn Backend>,
    retry: RetryPolicy,
    limiter: Option<std::sync::Arc<RateLimiter>>,
    cache: Option<ResponseCache>,
}

impl Client {
    pub fn new(backend: Box<dyn Backend>) -> Client {
        Client {
            backend,
            retry: RetryPolicy::default(),
            limiter: None,
            cache: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Client {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: std::sync::Arc<RateLimiter>) -> Client {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Client {
        self.cache = Some(cache);
        self
    }

    /// Sends the request, retrying transient failures (timeouts, rate
    /// limits, 5xx) with backoff. Authentication failures are returned
    /// immediately. The retry count ends up in `backend_meta`.
    pub fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, OracleError> {
        let mut attempt: u32 = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.backend.complete(request) {
                Ok(mut response) => {
                    if attempt > 0 {
                        if !response.backend_meta.is_empty() {
                            response.backend_meta.push(' ');
                        }
                        response
                            .backend_meta
                            .push_str(&format!("retries={attempt}"));
                    }
                    return Ok(response);
                }
                Err(err) if err.is_transient() && attempt < self.retry.max_retries => {
                    log::debug!("transient backend failure (attempt {attempt}): {err}");
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(OracleError::RateLimited) => {
                    return Err(OracleError::RateLimitExhausted {
                        attempts: attempt + 1,
                    })
                }
                Err(err) => return Err(err),
            }
        }
    }

    /// Like [`Client::complete`] but consults the response cache first.
    /// Returns the reply and whether it was served from the cache.
    pub fn cached_complete(
        &self,
        request: &BackendRequest,
    ) -> Result<(BackendResponse, bool), OracleError> {
        let digest = request.digest();
        if let Some(cache) = &self.cache {
            if let Some(response) = cache.load(&digest) {
                return Ok((response, true));
            }
        }
        let response = self.complete(request)?;
        if let Some(cache) = &self.cache {
            cache.store(&digest, &request.model_id, &response)?;
        }
        Ok((response, false))
    }
}

// ---------------------------------------------------------------------------
// Live backend
// ---------------------------------------------------------------------------

/// OpenAI-style `/chat/completions` transport with data-URL image
/// attachments and per-token log-probabilities.
pub struct LiveBackend {
    http: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
}

impl LiveBackend {
    pub fn new(
        base_url: &str,
        api_key: &str,
        timeout: Duration,
    ) -> Result<LiveBackend, OracleError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| OracleError::Transport {
                message: e.to_string(),
                transient: false,
            })?;
        Ok(LiveBackend {
            http,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
        })
    }

    fn request_body(request: &BackendRequest) -> serde_json::Value {
        let mut content = vec![serde_json::json!({
            "type": "text",
            "text": request.prompt_text,
        })];
        for attachment in &request.attachments {
            let encoded = base64::engine::general_purpose::STANDARD.encode(&attachment.png);
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{encoded}") },
            }));
        }
        let mut body = serde_json::json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": [{ "role": "user", "content": content }],
        });
        if request.top_k_logprobs > 0 {
            body["logprobs"] = serde_json::Value::Bool(true);
            body["top_logprobs"] = serde_json::json!(request.top_k_logprobs);
        }
        body
    }
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    content: Vec<ChatTokenLogprob>,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<ChatTopLogprob>,
}

#[derive(Deserialize)]
struct ChatTopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl Backend for LiveBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, OracleError> {
        let url = format!("{}/chat/completions", self.base_url);
        let result = self
            .http
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&Self::request_body(request))
            .send();
        let reply = match result {
            Ok(reply) => reply,
            Err(err) => {
                return Err(OracleError::Transport {
                    message: err.to_string(),
                    transient: err.is_timeout() || err.is_connect(),
                })
            }
        };
        let status = reply.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(OracleError::Auth(format!("backend returned {status}")));
        }
        if status.as_u16() == 429 {
            return Err(OracleError::RateLimited);
        }
        if status.is_server_error() {
            return Err(OracleError::Transport {
                message: format!("backend returned {status}"),
                transient: true,
            });
        }
        if !status.is_success() {
            let body = reply.text().unwrap_or_default();
            return Err(OracleError::Transport {
                message: format!("backend returned {status}: {body}"),
                transient: false,
            });
        }
        let parsed: ChatReply = reply
            .json()
            .map_err(|e| OracleError::MalformedReply(e.to_string()))?;
        let choice =
            parsed.choices.into_iter().next().ok_or_else(|| {
                OracleError::MalformedReply("reply carried no choices".to_string())
            })?;
        let tokens = choice
            .logprobs
            .map(|lp| {
                lp.content
                    .into_iter()
                    .map(|t| {
                        TokenRecord::new(
                            t.token,
                            t.logprob,
                            t.top_logprobs
                                .into_iter()
                                .map(|a| (a.token, a.logprob))
                                .collect(),
                        )
                    })
                    .collect()
            })
            .unwrap_or_default();
        let response = BackendResponse {
            text: choice.message.content,
            tokens,
            usage: parsed
                .usage
                .map(|u| TokenUsage {
                    input_tokens: u.prompt_tokens,
                    output_tokens: u.completion_tokens,
                })
                .unwrap_or_default(),
            backend_meta: parsed.model.unwrap_or_default(),
        };
        if !response.tokens_match_text() {
            return Err(OracleError::MalformedReply(
                "token texts do not concatenate to the reply text".to_string(),
            ));
        }
        Ok(response)
    }
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct FixtureEntry {
    #[serde(rename = "match")]
    matcher: String,
    response: FixtureResponse,
}

#[derive(Deserialize)]
struct FixtureResponse {
    text: String,
    #[serde(default)]
    tokens: Vec<TokenRecord>,
    #[serde(default)]
    usage: TokenUsage,
}

/// Deterministic offline backend fed from a JSON fixture.
///
/// Fixture shape: a list of `{ "match": ..., "response": ... }` entries.
/// A matcher is either `"digest:<hex>"` pinning one exact request, or
/// `"default"`. Several `default` entries form a rotation served round
/// robin, which is how repeat-sampling runs get varying replies.
pub struct MockBackend {
    by_digest: HashMap<String, BackendResponse>,
    defaults: Vec<BackendResponse>,
    cursor: AtomicUsize,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn from_fixture(path: &Path) -> Result<MockBackend, OracleError> {
        let bytes = fs::read(path)?;
        let entries: Vec<FixtureEntry> = serde_json::from_slice(&bytes)
            .map_err(|e| OracleError::FixtureParse(format!("{}: {e}", path.display())))?;
        let mut by_digest = HashMap::new();
        let mut defaults = Vec::new();
        for (index, entry) in entries.into_iter().enumerate() {
            let response = BackendResponse {
                text: entry.response.text,
                tokens: entry.response.tokens,
                usage: entry.response.usage,
                backend_meta: "mock".to_string(),
            };
            if !response.tokens_match_text() {
                return Err(OracleError::FixtureParse(format!(
                    "entry {index}: token texts do not concatenate to the reply text"
                )));
            }
            if let Some(digest) = entry.matcher.strip_prefix("digest:") {
                by_digest.insert(digest.to_string(), response);
            } else if entry.matcher == "default" {
                defaults.push(response);
            } else {
                return Err(OracleError::FixtureParse(format!(
                    "entry {index}: unknown matcher {:?}",
                    entry.matcher
                )));
            }
        }
        Ok(MockBackend {
            by_digest,
            defaults,
            cursor: AtomicUsize::new(0),
            calls: AtomicU64::new(0),
        })
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = request.digest();
        if let Some(response) = self.by_digest.get(&digest) {
            return Ok(response.clone());
        }
        if self.defaults.is_empty() {
            return Err(OracleError::UnknownRequest(digest));
        }
        let index = self.cursor.fetch_add(1, Ordering::SeqCst) % self.defaults.len();
        Ok(self.defaults[index].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn request(prompt: &str) -> BackendRequest {
        BackendRequest {
            model_id: "judge-1".to_string(),
            prompt_text: prompt.to_string(),
            attachments: Vec::new(),
            temperature: 0.0,
            top_k_logprobs: 20,
            max_output_tokens: 512,
        }
    }

    fn scored_response(text: &str) -> BackendResponse {
        BackendResponse {
            text: text.to_string(),
            tokens: vec![TokenRecord::new(text.to_string(), -0.01, Vec::new())],
            usage: TokenUsage {
                input_tokens: 10,
                output_tokens: 3,
            },
            backend_meta: String::new(),
        }
    }

    #[test]
    fn digest_is_stable_and_field_sensitive() {
        let base = request("prompt");
        assert_eq!(base.digest(), request("prompt").digest());

        let mut other = request("prompt");
        other.temperature = 0.5;
        assert_ne!(base.digest(), other.digest());

        let mut other = request("prompt");
        other.top_k_logprobs = 5;
        assert_ne!(base.digest(), other.digest());

        let mut other = request("prompt");
        other.attachments.push(ImagePayload::new(vec![1, 2, 3]));
        assert_ne!(base.digest(), other.digest());

        assert_ne!(base.digest(), request("prompt ").digest());
    }

    #[test]
    fn token_record_inserts_realized_and_sorts() {
        let record = TokenRecord::new(
            "85".to_string(),
            -0.5,
            vec![("90".to_string(), -1.2), ("80".to_string(), -0.1)],
        );
        assert_eq!(record.alternatives[0].0, "80");
        assert!(record.alternatives.iter().any(|(t, _)| t == "85"));
        assert_eq!(record.alternatives.len(), 3);

        let already = TokenRecord::new("85".to_string(), -0.5, vec![("85".to_string(), -0.5)]);
        assert_eq!(already.alternatives.len(), 1);
    }

    #[test]
    fn response_token_concat_check() {
        let good = BackendResponse {
            text: "ab".to_string(),
            tokens: vec![
                TokenRecord::new("a".to_string(), -0.1, Vec::new()),
                TokenRecord::new("b".to_string(), -0.1, Vec::new()),
            ],
            usage: TokenUsage::default(),
            backend_meta: String::new(),
        };
        assert!(good.tokens_match_text());
        let mut bad = good.clone();
        bad.text = "ac".to_string();
        assert!(!bad.tokens_match_text());
    }

    struct Flaky {
        failures: AtomicU32,
        calls: std::sync::Arc<AtomicU32>,
    }

    impl Flaky {
        fn failing(times: u32) -> (Flaky, std::sync::Arc<AtomicU32>) {
            let calls = std::sync::Arc::new(AtomicU32::new(0));
            (
                Flaky {
                    failures: AtomicU32::new(times),
                    calls: calls.clone(),
                },
                calls,
            )
        }
    }

    impl Backend for Flaky {
        fn complete(&self, _request: &BackendRequest) -> Result<BackendResponse, OracleError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(OracleError::RateLimited);
            }
            Ok(scored_response("The final score is $85$."))
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            initial_delay_ms: 1,
            max_delay_ms: 2,
            backoff_base: 2.0,
        }
    }

    #[test]
    fn transient_failures_are_retried_and_counted() {
        let (backend, calls) = Flaky::failing(2);
        let client = Client::new(Box::new(backend)).with_retry(fast_retry());
        let response = client.complete(&request("p")).unwrap();
        assert!(response.backend_meta.contains("retries=2"));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn rate_limit_exhaustion_is_reported() {
        let (backend, _calls) = Flaky::failing(10);
        let client = Client::new(Box::new(backend)).with_retry(fast_retry());
        match client.complete(&request("p")) {
            Err(OracleError::RateLimitExhausted { attempts }) => assert_eq!(attempts, 4),
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    struct AlwaysAuthError {
        calls: std::sync::Arc<AtomicU32>,
    }

    impl Backend for AlwaysAuthError {
        fn complete(&self, _request: &BackendRequest) -> Result<BackendResponse, OracleError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Err(OracleError::Auth("bad key".to_string()))
        }
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let calls = std::sync::Arc::new(AtomicU32::new(0));
        let backend = AlwaysAuthError {
            calls: calls.clone(),
        };
        let client = Client::new(Box::new(backend)).with_retry(fast_retry());
        assert!(matches!(
            client.complete(&request("p")),
            Err(OracleError::Auth(_))
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_round_trip_and_shard_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let req = request("cached prompt");
        let digest = req.digest();
        let response = scored_response("The final score is $90$.");

        assert!(cache.load(&digest).is_none());
        cache.store(&digest, &req.model_id, &response).unwrap();

        let shard = dir.path().join(&digest[..2]).join(format!("{digest}.json"));
        assert!(shard.is_file());

        let loaded = cache.load(&digest).unwrap();
        assert_eq!(loaded.text, response.text);
        assert_eq!(loaded.tokens, response.tokens);
        assert_eq!(loaded.usage, response.usage);
    }

    #[test]
    fn corrupt_cache_blob_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let req = request("p");
        let digest = req.digest();
        let shard = dir.path().join(&digest[..2]);
        fs::create_dir_all(&shard).unwrap();
        fs::write(shard.join(format!("{digest}.json")), b"{ not json").unwrap();
        assert!(cache.load(&digest).is_none());

        cache
            .store(&digest, "judge-1", &scored_response("ok"))
            .unwrap();
        assert!(cache.load(&digest).is_some());
    }

    #[test]
    fn cached_complete_hits_after_store() {
        let dir = tempfile::tempdir().unwrap();
        let (backend, calls) = Flaky::failing(0);
        let client = Client::new(Box::new(backend))
            .with_retry(fast_retry())
            .with_cache(ResponseCache::new(dir.path()));
        let req = request("p");

        let (first, hit1) = client.cached_complete(&req).unwrap();
        let (second, hit2) = client.cached_complete(&req).unwrap();
        assert!(!hit1);
        assert!(hit2);
        assert_eq!(first.text, second.text);
        assert_eq!(first.tokens, second.tokens);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    fn write_fixture(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("fixture.json");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn mock_backend_matches_digest_then_default_rotation() {
        let dir = tempfile::tempdir().unwrap();
        let pinned = request("pinned");
        let fixture = format!(
            r#"[
                {{"match": "digest:{}", "response": {{"text": "pinned reply"}}}},
                {{"match": "default", "response": {{"text": "first"}}}},
                {{"match": "default", "response": {{"text": "second"}}}}
            ]"#,
            pinned.digest()
        );
        let path = write_fixture(dir.path(), &fixture);
        let mock = MockBackend::from_fixture(&path).unwrap();

        assert_eq!(mock.complete(&pinned).unwrap().text, "pinned reply");
        assert_eq!(mock.complete(&request("a")).unwrap().text, "first");
        assert_eq!(mock.complete(&request("b")).unwrap().text, "second");
        assert_eq!(mock.complete(&request("c")).unwrap().text, "first");
        assert_eq!(mock.calls(), 4);
    }

    #[test]
    fn mock_backend_without_default_rejects_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), "[]");
        let mock = MockBackend::from_fixture(&path).unwrap();
        assert!(matches!(
            mock.complete(&request("a")),
            Err(OracleError::UnknownRequest(_))
        ));
    }

    #[test]
    fn fixture_with_inconsistent_tokens_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            r#"[{"match": "default", "response": {
                "text": "abc",
                "tokens": [{"text": "zzz", "logprob": -0.1, "alternatives": []}]
            }}]"#,
        );
        assert!(matches!(
            MockBackend::from_fixture(&path),
            Err(OracleError::FixtureParse(_))
        ));
    }

    #[test]
    fn limiter_spaces_but_does_not_deadlock() {
        let limiter = RateLimiter::new(1000.0, 2);
        for _ in 0..5 {
            limiter.acquire();
        }
    }
}
