//! The only channel to the server LLM and the embedding service: an HTTP
//! client speaking the OpenAI-compatible chat/embeddings protocol, plus a
//! scripted deterministic mock backend for hermetic tests. Every request
//! that crosses this boundary is recorded so tests can prove that no
//! private text ever reaches the server.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error("request {request_id}: retries exhausted after {attempts} attempts: {trace:?}")]
    RetriesExhausted {
        request_id: String,
        attempts: usize,
        trace: Vec<String>,
    },
    #[error("request {request_id}: non-retryable status {status}: {body}")]
    NonRetryable {
        request_id: String,
        status: u16,
        body: String,
    },
    #[error("request {request_id}: malformed response: {message}")]
    MalformedResponse { request_id: String, message: String },
    #[error("embedding dimension mismatch at indices {indices:?}: expected {expected}")]
    EmbeddingDimensionMismatch {
        indices: Vec<usize>,
        expected: usize,
    },
    #[error("request {request_id}: no mock rule matched")]
    NoMatchingRule { request_id: String },
}

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub request_id: String,
}

impl LlmRequest {
    pub fn new(user_prompt: impl Into<String>, request_id: impl Into<String>) -> Self {
        Self {
            system_prompt: String::new(),
            user_prompt: user_prompt.into(),
            temperature: 0.6,
            top_p: 0.9,
            max_tokens: 1024,
            request_id: request_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 100,
            backoff_cap_ms: 5_000,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model: String,
    pub max_parallel: usize,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    pub backend: BackendKind,
    /// Dimension of mock embeddings; remote embeddings carry their own.
    pub embed_dim: usize,
    /// Bearer credential; looked up from `FDKT_LLM_API_KEY` when unset.
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl std::fmt::Debug for GatewayConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GatewayConfig")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("max_parallel", &self.max_parallel)
            .field("retry", &self.retry)
            .field("timeout_ms", &self.timeout_ms)
            .field("backend", &self.backend)
            .field("embed_dim", &self.embed_dim)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: std::env::var("FDKT_LLM_ENDPOINT").unwrap_or_default(),
            model: "local-llm".to_string(),
            max_parallel: 8,
            retry: RetryPolicy::default(),
            timeout_ms: 30_000,
            backend: BackendKind::Mock,
            embed_dim: 16,
            api_key: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_parallel < 1 {
            return Err(GatewayError::InvalidConfig(
                "max_parallel must be >= 1".into(),
            ));
        }
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::InvalidConfig(
                "retry.max_attempts must be >= 1".into(),
            ));
        }
        if self.backend == BackendKind::Http && self.endpoint.is_empty() {
            return Err(GatewayError::InvalidConfig(
                "http backend requires an endpoint (or FDKT_LLM_ENDPOINT)".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic response source for one kind of prompt.
type Responder = Arc<dyn Fn(&LlmRequest, u64) -> String + Send + Sync>;
type Predicate = Arc<dyn Fn(&LlmRequest) -> bool + Send + Sync>;

enum Matcher {
    Contains(String),
    Predicate(Predicate),
    Any,
}

impl Matcher {
    fn matches(&self, request: &LlmRequest) -> bool {
        match self {
            Matcher::Contains(needle) => request.user_prompt.contains(needle),
            Matcher::Predicate(pred) => pred(request),
            Matcher::Any => true,
        }
    }
}

struct MockRule {
    name: String,
    matcher: Matcher,
    responder: Responder,
}

/// Ordered prompt-matching rules ending in a mandatory catch-all. Responses
/// are pure functions of (request, call index), so a scripted pipeline run
/// is byte-reproducible.
pub struct MockScript {
    rules: Vec<MockRule>,
    latency: Option<Duration>,
}

impl std::fmt::Debug for MockScript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.rules.iter().map(|r| r.name.as_str()).collect();
        f.debug_struct("MockScript")
            .field("rules", &names)
            .field("latency", &self.latency)
            .finish()
    }
}

impl MockScript {
    pub fn builder() -> MockScriptBuilder {
        MockScriptBuilder {
            rules: Vec::new(),
            latency: None,
        }
    }

    pub fn rule_names(&self) -> Vec<&str> {
        self.rules.iter().map(|r| r.name.as_str()).collect()
    }
}

pub struct MockScriptBuilder {
    rules: Vec<MockRule>,
    latency: Option<Duration>,
}

impl MockScriptBuilder {
    /// Matches when the user prompt contains `needle`.
    pub fn on_contains(
        mut self,
        name: impl Into<String>,
        needle: impl Into<String>,
        responder: impl Fn(&LlmRequest, u64) -> String + Send + Sync + 'static,
    ) -> Self {
        self.rules.push(MockRule {
            name: name.into(),
            matcher: Matcher::Contains(needle.into()),
            responder: Arc::new(responder),
        });
        self
    }

    pub fn on(
        mut self,
        name: impl Into<String>,
        predicate: impl Fn(&LlmRequest) -> bool + Send + Sync + 'static,
        responder: impl Fn(&LlmRequest, u64) -> String + Send + Sync + 'static,
    ) -> Self {
        self.rules.push(MockRule {
            name: name.into(),
            matcher: Matcher::Predicate(Arc::new(predicate)),
            responder: Arc::new(responder),
        });
        self
    }

    /// Simulated per-call service time (for concurrency instrumentation).
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Installs the mandatory final catch-all and finishes the script.
    pub fn catch_all(
        mut self,
        responder: impl Fn(&LlmRequest, u64) -> String + Send + Sync + 'static,
    ) -> MockScript {
        self.rules.push(MockRule {
            name: "catch-all".into(),
            matcher: Matcher::Any,
            responder: Arc::new(responder),
        });
        MockScript {
            rules: self.rules,
            latency: self.latency,
        }
    }
}

/// What kind of payload crossed the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Chat,
    Embed,
}

/// Audit row for one boundary crossing. `content` carries every piece of
/// text that left the client in that request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub kind: RequestKind,
    pub request_id: String,
    pub content: String,
}

/// Shared, thread-safe client for the server LLM. An internal pool of
/// worker threads bounds parallelism; each request is independent.
pub struct Gateway {
    config: GatewayConfig,
    mock: Option<MockScript>,
    http: Option<reqwest::blocking::Client>,
    log: Mutex<Vec<RecordedRequest>>,
    call_counter: AtomicU64,
    chat_count: AtomicUsize,
    embed_count: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    pub fn mock(config: GatewayConfig, script: MockScript) -> Result<Self, GatewayError> {
        let config = GatewayConfig {
            backend: BackendKind::Mock,
            ..config
        };
        config.validate()?;
        Ok(Self {
            config,
            mock: Some(script),
            http: None,
            log: Mutex::new(Vec::new()),
            call_counter: AtomicU64::new(0),
            chat_count: AtomicUsize::new(0),
            embed_count: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        })
    }

    pub fn http(config: GatewayConfig) -> Result<Self, GatewayError> {
        let mut config = GatewayConfig {
            backend: BackendKind::Http,
            ..config
        };
        if config.api_key.is_none() {
            config.api_key = std::env::var("FDKT_LLM_API_KEY").ok();
        }
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self {
            config,
            mock: None,
            http: Some(client),
            log: Mutex::new(Vec::new()),
            call_counter: AtomicU64::new(0),
            chat_count: AtomicUsize::new(0),
            embed_count: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn chat_request_count(&self) -> usize {
        self.chat_count.load(Ordering::SeqCst)
    }

    pub fn embed_request_count(&self) -> usize {
        self.embed_count.load(Ordering::SeqCst)
    }

    pub fn total_request_count(&self) -> usize {
        self.chat_request_count() + self.embed_request_count()
    }

    /// Highest number of requests observed in flight at once.
    pub fn peak_concurrency(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Every request that has crossed the boundary so far.
    pub fn request_log(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("gateway log poisoned").clone()
    }

    fn record(&self, kind: RequestKind, request_id: &str, content: String) {
        self.log
            .lock()
            .expect("gateway log poisoned")
            .push(RecordedRequest {
                kind,
                request_id: request_id.to_string(),
                content,
            });
    }

    fn enter(&self) {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
    }

    fn exit(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    /// Sends one chat completion and returns the first choice's text.
    pub fn complete(&self, request: &LlmRequest) -> Result<String, GatewayError> {
        let call_index = self.call_counter.fetch_add(1, Ordering::SeqCst);
        self.complete_with_index(request, call_index)
    }

    fn complete_with_index(
        &self,
        request: &LlmRequest,
        call_index: u64,
    ) -> Result<String, GatewayError> {
        self.chat_count.fetch_add(1, Ordering::SeqCst);
        self.record(
            RequestKind::Chat,
            &request.request_id,
            format!("{}\n{}", request.system_prompt, request.user_prompt),
        );
        self.enter();
        let result = match self.config.backend {
            BackendKind::Mock => self.mock_complete(request, call_index),
            BackendKind::Http => self.http_complete(request),
        };
        self.exit();
        result
    }

    fn mock_complete(&self, request: &LlmRequest, call_index: u64) -> Result<String, GatewayError> {
        let script = self.mock.as_ref().expect("mock backend without script");
        if let Some(latency) = script.latency {
            std::thread::sleep(latency);
        }
        for rule in &script.rules {
            if rule.matcher.matches(request) {
                return Ok((rule.responder)(request, call_index));
            }
        }
        Err(GatewayError::NoMatchingRule {
            request_id: request.request_id.clone(),
        })
    }

    fn http_complete(&self, request: &LlmRequest) -> Result<String, GatewayError> {
        let client = self.http.as_ref().expect("http backend without client");
        let url = format!(
            "{}/v1/chat/completions",
            self.config.endpoint.trim_end_matches('/')
        );
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(serde_json::json!({
                "role": "system",
                "content": request.system_prompt,
            }));
        }
        messages.push(serde_json::json!({
            "role": "user",
            "content": request.user_prompt,
        }));
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });

        let mut trace = Vec::new();
        for attempt in 0..self.config.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_delay(attempt - 1));
            }
            let mut req = client.post(&url).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: ChatResponse =
                            resp.json().map_err(|e| GatewayError::MalformedResponse {
                                request_id: request.request_id.clone(),
                                message: e.to_string(),
                            })?;
                        return parsed
                            .choices
                            .into_iter()
                            .next()
                            .map(|c| c.message.content)
                            .ok_or_else(|| GatewayError::MalformedResponse {
                                request_id: request.request_id.clone(),
                                message: "no choices in response".into(),
                            });
                    }
                    let code = status.as_u16();
                    if code == 429 || status.is_server_error() {
                        trace.push(format!("attempt {}: status {code}", attempt + 1));
                        continue;
                    }
                    let body = resp.text().unwrap_or_default();
                    return Err(GatewayError::NonRetryable {
                        request_id: request.request_id.clone(),
                        status: code,
                        body,
                    });
                }
                Err(e) => {
                    trace.push(format!("attempt {}: {e}", attempt + 1));
                }
            }
        }
        Err(GatewayError::RetriesExhausted {
            request_id: request.request_id.clone(),
            attempts: self.config.retry.max_attempts,
            trace,
        })
    }

    /// Exponential backoff with bounded additive jitter; the sequence of
    /// delays is non-decreasing up to the cap.
    fn backoff_delay(&self, retry_index: usize) -> Duration {
        use rand::Rng;
        let base = self.config.retry.backoff_base_ms;
        let cap = self.config.retry.backoff_cap_ms;
        let exp = base.saturating_mul(1u64 << retry_index.min(20));
        let jitter = rand::rng().random_range(0..=base);
        Duration::from_millis(exp.saturating_add(jitter).min(cap))
    }

    /// Dispatches up to `max_parallel` requests at a time; the output order
    /// matches the input order and per-request failures stay individual.
    pub fn complete_batch(&self, requests: &[LlmRequest]) -> Vec<Result<String, GatewayError>> {
        if requests.is_empty() {
            return Vec::new();
        }
        // Call indices are assigned in submission order so mock responses do
        // not depend on scheduling.
        let jobs: VecDeque<(usize, u64)> = requests
            .iter()
            .enumerate()
            .map(|(i, _)| (i, self.call_counter.fetch_add(1, Ordering::SeqCst)))
            .collect();
        let queue = Mutex::new(jobs);
        let results: Vec<Mutex<Option<Result<String, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_parallel.min(requests.len());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let job = queue.lock().expect("gateway queue poisoned").pop_front();
                    let Some((idx, call_index)) = job else {
                        break;
                    };
                    let outcome = self.complete_with_index(&requests[idx], call_index);
                    *results[idx].lock().expect("gateway result poisoned") = Some(outcome);
                });
            }
        });

        results
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("gateway result poisoned")
                    .expect("worker left a result hole")
            })
            .collect()
    }

    /// Order-preserving embeddings with uniform dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidConfig(
                "embed requires at least one text".into(),
            ));
        }
        self.embed_count.fetch_add(1, Ordering::SeqCst);
        let request_id = format!("embed-{}", self.call_counter.fetch_add(1, Ordering::SeqCst));
        self.record(RequestKind::Embed, &request_id, texts.join("\n"));
        match self.config.backend {
            BackendKind::Mock => Ok(texts
                .iter()
                .map(|t| crate::filter::hash_embedding(t, self.config.embed_dim))
                .collect()),
            BackendKind::Http => self.http_embed(&request_id, texts),
        }
    }

    fn http_embed(
        &self,
        request_id: &str,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, GatewayError> {
        let client = self.http.as_ref().expect("http backend without client");
        let url = format!(
            "{}/v1/embeddings",
            self.config.endpoint.trim_end_matches('/')
        );
        let body = serde_json::json!({ "model": self.config.model, "input": texts });
        let mut trace = Vec::new();
        for attempt in 0..self.config.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_delay(attempt - 1));
            }
            let mut req = client.post(&url).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: EmbedResponse =
                        resp.json().map_err(|e| GatewayError::MalformedResponse {
                            request_id: request_id.to_string(),
                            message: e.to_string(),
                        })?;
                    let mut rows = parsed.data;
                    rows.sort_by_key(|r| r.index);
                    if rows.len() != texts.len() {
                        return Err(GatewayError::MalformedResponse {
                            request_id: request_id.to_string(),
                            message: format!(
                                "expected {} embeddings, got {}",
                                texts.len(),
                                rows.len()
                            ),
                        });
                    }
                    let vectors: Vec<Vec<f64>> = rows.into_iter().map(|r| r.embedding).collect();
                    validate_uniform_dimension(&vectors)?;
                    return Ok(vectors);
                }
                Ok(resp) => {
                    let code = resp.status().as_u16();
                    if code == 429 || resp.status().is_server_error() {
                        trace.push(format!("attempt {}: status {code}", attempt + 1));
                        continue;
                    }
                    return Err(GatewayError::NonRetryable {
                        request_id: request_id.to_string(),
                        status: code,
                        body: resp.text().unwrap_or_default(),
                    });
                }
                Err(e) => trace.push(format!("attempt {}: {e}", attempt + 1)),
            }
        }
        Err(GatewayError::RetriesExhausted {
            request_id: request_id.to_string(),
            attempts: self.config.retry.max_attempts,
            trace,
        })
    }
}

pub(crate) fn validate_uniform_dimension(vectors: &[Vec<f64>]) -> Result<(), GatewayError> {
    let Some(first) = vectors.first() else {
        return Ok(());
    };
    let expected = first.len();
    let offenders: Vec<usize> = vectors
        .iter()
        .enumerate()
        .filter(|(_, v)| v.len() != expected)
        .map(|(i, _)| i)
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(GatewayError::EmbeddingDimensionMismatch {
            indices: offenders,
            expected,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedRow>,
}

#[derive(Deserialize)]
struct EmbedRow {
    index: usize,
    embedding: Vec<f64>,
}
