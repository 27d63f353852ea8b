//! Chat-completion client: sampling configuration, request fingerprints,
//! a persistent response cache, bounded retries and a scripted mock.

mod cache;
mod http;
mod mock;
mod retry;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, CacheError, ResponseCache};
pub use http::CallError;
pub(crate) use http::JsonPoster;
pub use mock::{MockChat, ScriptedFailure};
pub use retry::{InFlightLimit, RetryOutcome, RetryPolicy};

pub(crate) use cache::truncate_torn_tail;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("gave up after {attempts} attempts: {last}")]
    Retriable { attempts: u32, last: CallError },
    #[error("request rejected with HTTP {status}: {body}")]
    Permanent { status: u16, body: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Retriable { .. })
    }

    pub(crate) fn from_retry(outcome: RetryOutcome) -> Self {
        match outcome {
            RetryOutcome::Exhausted { attempts, last } => {
                BackendError::Retriable { attempts, last }
            }
            RetryOutcome::Permanent(CallError::Status { status, body }) => {
                BackendError::Permanent { status, body }
            }
            RetryOutcome::Permanent(CallError::InvalidResponse(m)) => {
                BackendError::InvalidResponse(m)
            }
            RetryOutcome::Permanent(CallError::Config(m)) => BackendError::Config(m),
            RetryOutcome::Permanent(e @ CallError::Transport(_)) => BackendError::Retriable {
                attempts: 1,
                last: e,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

/// Decoding settings. Defaults: temperature 0.4, top-p 1.0, repetition
/// penalty 1.1, 1024 new tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.4,
            top_p: 1.0,
            repetition_penalty: 1.1,
            max_tokens: 1024,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidRequest(m.to_string()));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty > 0.0) {
            return bad("repetition_penalty must be > 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

/// One configured generator. `auth` names an environment variable holding
/// a bearer token; it is read when a request is sent and is never written
/// back out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub backend_id: String,
    pub endpoint: String,
    pub model_name: String,
    #[serde(default, skip_serializing)]
    pub auth: Option<String>,
    #[serde(default = "default_true")]
    pub supports_repetition_penalty: bool,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl BackendSpec {
    pub fn new(
        backend_id: impl Into<String>,
        endpoint: impl Into<String>,
        model_name: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let spec = Self {
            backend_id: backend_id.into(),
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            auth: None,
            supports_repetition_penalty: true,
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.backend_id.trim().is_empty() {
            return Err(BackendError::Config("backend_id must not be empty".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(BackendError::Config("model_name must not be empty".into()));
        }
        validate_url(&self.endpoint).map_err(BackendError::Config)
    }
}

pub(crate) fn validate_url(endpoint: &str) -> Result<(), String> {
    let parsed = url::Url::parse(endpoint).map_err(|e| format!("endpoint '{endpoint}': {e}"))?;
    if parsed.cannot_be_a_base() {
        return Err(format!("endpoint '{endpoint}' is not a hierarchical URL"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub backend_id: String,
    pub model_name: String,
    pub request_fingerprint: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

/// Stable hash over the model, the full message list and the sampling
/// parameters. Keys are serialized in sorted order.
pub fn fingerprint(messages: &[ChatMessage], params: &SamplingParams, model_name: &str) -> String {
    let canonical = json!({
        "model": model_name,
        "messages": messages,
        "params": params,
    });
    let bytes = serde_json::to_vec(&canonical).expect("fingerprint input serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Request body for the chat-completion wire protocol.
pub fn wire_request(
    messages: &[ChatMessage],
    params: &SamplingParams,
    backend: &BackendSpec,
) -> Value {
    let mut body = json!({
        "model": backend.model_name,
        "messages": messages,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "max_tokens": params.max_tokens,
    });
    if backend.supports_repetition_penalty {
        body["repetition_penalty"] = json!(params.repetition_penalty);
    }
    body
}

fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    let bad = |m: &str| Err(BackendError::InvalidRequest(m.to_string()));
    let rest = match messages.first() {
        None => return bad("message list is empty"),
        Some(m) if m.role == Role::System => &messages[1..],
        Some(_) => messages,
    };
    if rest.is_empty() {
        return bad("a system message needs a following user message");
    }
    for (i, m) in rest.iter().enumerate() {
        let expected = if i % 2 == 0 {
            Role::User
        } else {
            Role::Assistant
        };
        if m.role != expected {
            return bad("roles must alternate user/assistant after an optional system message");
        }
    }
    if rest.last().map(|m| m.role) != Some(Role::User) {
        return bad("the last message must come from the user");
    }
    Ok(())
}

/// One outgoing request as seen by a transport.
#[derive(Debug)]
pub struct ChatCall<'a> {
    pub fingerprint: &'a str,
    pub messages: &'a [ChatMessage],
    pub body: &'a Value,
}

/// Moves a chat request over the wire and returns the completion text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, call: &ChatCall<'_>) -> Result<String, CallError>;
}

/// JSON-over-HTTP chat-completion transport.
#[derive(Debug)]
pub struct HttpChat {
    endpoint: String,
    auth_env: Option<String>,
    poster: JsonPoster,
}

impl HttpChat {
    pub fn new(backend: &BackendSpec) -> Self {
        Self {
            endpoint: backend.endpoint.clone(),
            auth_env: backend.auth.clone(),
            poster: JsonPoster::new(Duration::from_secs(backend.timeout_secs)),
        }
    }
}

pub(crate) fn bearer_token(auth_env: Option<&str>) -> Result<Option<String>, CallError> {
    match auth_env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| CallError::Config(format!("environment variable {var} is not set"))),
    }
}

impl ChatTransport for HttpChat {
    fn send(&self, call: &ChatCall<'_>) -> Result<String, CallError> {
        let token = bearer_token(self.auth_env.as_deref())?;
        let response = self
            .poster
            .post(&self.endpoint, call.body, token.as_deref())?;
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| CallError::InvalidResponse("missing choices[0].message.content".into()))
    }
}

/// Client for one backend. Shareable across worker threads.
pub struct LlmClient {
    backend: BackendSpec,
    transport: Arc<dyn ChatTransport>,
    cache: Arc<ResponseCache>,
    retry: RetryPolicy,
    limit: InFlightLimit,
    network_calls: AtomicUsize,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend_id", &self.backend.backend_id)
            .field("model_name", &self.backend.model_name)
            .finish()
    }
}

impl LlmClient {
    pub fn new(
        backend: BackendSpec,
        transport: Arc<dyn ChatTransport>,
        cache: Arc<ResponseCache>,
        retry: RetryPolicy,
    ) -> Self {
        let limit = InFlightLimit::new(backend.max_in_flight);
        Self {
            backend,
            transport,
            cache,
            retry,
            limit,
            network_calls: AtomicUsize::new(0),
        }
    }

    pub fn http(backend: BackendSpec, cache: Arc<ResponseCache>, retry: RetryPolicy) -> Self {
        let transport = Arc::new(HttpChat::new(&backend));
        Self::new(backend, transport, cache, retry)
    }

    pub fn backend(&self) -> &BackendSpec {
        &self.backend
    }

    /// Transport invocations so far, retries included. Cache hits do not count.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::Relaxed)
    }

    pub fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, BackendError> {
        validate_messages(messages)?;
        params.validate()?;
        let fp = fingerprint(messages, params, &self.backend.model_name);
        let completion = |text: String, latency_ms: u64, from_cache: bool| Completion {
            text,
            backend_id: self.backend.backend_id.clone(),
            model_name: self.backend.model_name.clone(),
            request_fingerprint: fp.clone(),
            latency_ms,
            from_cache,
        };
        if let Some(cached) = self.cache.get(&fp) {
            let text = cached
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::InvalidResponse("cache entry has no text".into()))?;
            let latency = cached
                .get("latency_ms")
                .and_then(Value::as_u64)
                .unwrap_or(0);
            return Ok(completion(text.to_string(), latency, true));
        }

        let body = wire_request(messages, params, &self.backend);
        let call = ChatCall {
            fingerprint: &fp,
            messages,
            body: &body,
        };
        let started = Instant::now();
        let text = {
            let _slot = self.limit.acquire();
            self.retry
                .run(|_| {
                    self.network_calls.fetch_add(1, Ordering::Relaxed);
                    self.transport.send(&call)
                })
                .map_err(BackendError::from_retry)?
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        self.cache.put(
            &fp,
            body.clone(),
            json!({ "text": text, "latency_ms": latency_ms }),
        )?;
        Ok(completion(text, latency_ms, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock_backend() -> BackendSpec {
        BackendSpec::new("mock", "mock://local", "mock-model").unwrap()
    }

    fn client(mock: MockChat) -> (LlmClient, Arc<MockChat>) {
        let mock = Arc::new(mock);
        let client = LlmClient::new(
            mock_backend(),
            mock.clone(),
            Arc::new(ResponseCache::in_memory()),
            RetryPolicy::no_delay(5),
        );
        (client, mock)
    }

    #[test]
    fn sampling_defaults() {
        let p = SamplingParams::default();
        assert_eq!(
            (p.temperature, p.top_p, p.repetition_penalty, p.max_tokens),
            (0.4, 1.0, 1.1, 1024)
        );
        let parsed: SamplingParams = serde_json::from_str(r#"{"temperature":0.0}"#).unwrap();
        assert_eq!(parsed.repetition_penalty, 1.1);
        assert!(SamplingParams {
            top_p: 0.0,
            ..p.clone()
        }
        .validate()
        .is_err());
        assert!(SamplingParams {
            temperature: -1.0,
            ..p
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fingerprint_sensitivity() {
        let msgs = vec![ChatMessage::user("a")];
        let p = SamplingParams::default();
        assert_eq!(fingerprint(&msgs, &p, "m"), fingerprint(&msgs, &p, "m"));
        let hotter = SamplingParams {
            temperature: 0.5,
            ..p.clone()
        };
        assert_ne!(
            fingerprint(&msgs, &p, "m"),
            fingerprint(&msgs, &hotter, "m")
        );
        assert_ne!(
            fingerprint(&msgs, &p, "m"),
            fingerprint(&[ChatMessage::user("a ")], &p, "m")
        );
        assert_ne!(fingerprint(&msgs, &p, "m"), fingerprint(&msgs, &p, "m2"));
    }

    #[test]
    fn wire_request_shape() {
        let msgs = vec![ChatMessage::user("hi")];
        let mut backend = mock_backend();
        let with = wire_request(&msgs, &SamplingParams::default(), &backend);
        assert_eq!(
            with,
            json!({
                "model": "mock-model",
                "messages": [{"role": "user", "content": "hi"}],
                "temperature": 0.4,
                "top_p": 1.0,
                "max_tokens": 1024,
                "repetition_penalty": 1.1
            })
        );
        backend.supports_repetition_penalty = false;
        let without = wire_request(&msgs, &SamplingParams::default(), &backend);
        let mut expected = with.clone();
        expected
            .as_object_mut()
            .unwrap()
            .remove("repetition_penalty");
        assert_eq!(without, expected);
    }

    #[test]
    fn message_validation() {
        let (c, _) = client(MockChat::fixed("<new>x</new>"));
        let p = SamplingParams::default();
        assert!(c.complete(&[], &p).is_err());
        assert!(c.complete(&[ChatMessage::assistant("x")], &p).is_err());
        assert!(c
            .complete(&[ChatMessage::user("a"), ChatMessage::assistant("b")], &p)
            .is_err());
        assert!(c
            .complete(
                &[
                    ChatMessage::system("s"),
                    ChatMessage::user("a"),
                    ChatMessage::assistant("b"),
                    ChatMessage::user("c")
                ],
                &p
            )
            .is_ok());
    }

    #[test]
    fn second_identical_call_hits_cache() {
        let (c, mock) = client(MockChat::fixed("<new>ok</new>"));
        let msgs = vec![ChatMessage::user("q")];
        let first = c.complete(&msgs, &SamplingParams::default()).unwrap();
        let second = c.complete(&msgs, &SamplingParams::default()).unwrap();
        assert!(!first.from_cache);
        assert!(second.from_cache);
        assert_eq!(first.text, second.text);
        assert_eq!(first.request_fingerprint, second.request_fingerprint);
        assert_eq!(mock.calls(), 1);
        assert_eq!(c.network_calls(), 1);
    }

    #[test]
    fn scripted_by_fingerprint() {
        let msgs = vec![ChatMessage::user("q")];
        let fp = fingerprint(&msgs, &SamplingParams::default(), "mock-model");
        let (c, _) = client(MockChat::new().with_fingerprint(&fp, "<new>ok</new>"));
        assert_eq!(
            c.complete(&msgs, &SamplingParams::default()).unwrap().text,
            "<new>ok</new>"
        );
    }

    #[test]
    fn error_taxonomy() {
        let msgs = vec![ChatMessage::user("q")];
        let p = SamplingParams::default();

        let (c, mock) = client(MockChat::fixed("x").fail_from(0, ScriptedFailure::Transient));
        let err = c.complete(&msgs, &p).unwrap_err();
        assert!(matches!(err, BackendError::Retriable { attempts: 5, .. }));
        assert_eq!(mock.calls(), 5);

        let (c, mock) = client(MockChat::fixed("x").fail_from(0, ScriptedFailure::Status(401)));
        let err = c.complete(&msgs, &p).unwrap_err();
        assert!(matches!(err, BackendError::Permanent { status: 401, .. }));
        assert_eq!(mock.calls(), 1);

        let (c, _) = client(MockChat::fixed("  "));
        assert!(matches!(
            c.complete(&msgs, &p),
            Err(BackendError::EmptyCompletion)
        ));

        let (c, mock) =
            client(MockChat::fixed("fine").fail_calls(0..2, ScriptedFailure::Status(503)));
        assert_eq!(c.complete(&msgs, &p).unwrap().text, "fine");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn auth_is_not_serialized() {
        let mut spec = mock_backend();
        spec.auth = Some("SECRET_TOKEN_VAR".into());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(!json.contains("SECRET_TOKEN_VAR"));
        let parsed: BackendSpec = serde_json::from_str(
            r#"{"backend_id":"b","endpoint":"http://x/v1","model_name":"m","auth":"VAR"}"#,
        )
        .unwrap();
        assert_eq!(parsed.auth.as_deref(), Some("VAR"));
        assert!(parsed.supports_repetition_penalty);
        assert!(BackendSpec::new("b", "not a url", "m").is_err());
    }
}
