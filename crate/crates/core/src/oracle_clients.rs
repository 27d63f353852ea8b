//! Clients for the black-box classifier and the sentence encoder.
//!
//! Wire protocol, JSON over HTTP:
//!
//! ```text
//! POST /classify {"text": str} | {"premise": str, "hypothesis": str}
//!             -> {"label": str, "scores": [f64, ...]?}
//! POST /embed    {"texts": [str, ...]} -> {"vectors": [[f64, ...], ...], "dim": int}
//! ```
//!
//! Responses are cached through the same [`ResponseCache`] the chat client
//! uses, so replays never touch the network.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{DomainError, LabelSet, PredictedLabel, SampleInput};
use crate::llm_backend::{
    validate_url, BackendError, CallError, InFlightLimit, JsonPoster, ResponseCache, RetryPolicy,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("embedding batch is empty")]
    EmptyBatch,
    #[error("classifier returned unknown label '{0}'")]
    UnknownLabel(String),
    #[error("invalid oracle response: {0}")]
    InvalidResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding vector has zero or non-finite norm")]
    DegenerateVector,
    #[error("invalid endpoint: {0}")]
    Endpoint(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl OracleError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, OracleError::Backend(e) if e.is_retriable())
    }
}

/// Where the classifier under test lives and which labels it speaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierEndpoint {
    pub endpoint: String,
    pub task_id: String,
    pub labels: LabelSet,
}

/// Unit-length sentence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn normalized(values: Vec<f64>) -> Result<Self, OracleError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(OracleError::DegenerateVector);
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// Posts one JSON payload to an oracle and returns its JSON answer.
pub trait OracleTransport: Send + Sync {
    fn post(&self, payload: &Value) -> Result<Value, CallError>;
}

#[derive(Debug)]
pub struct HttpOracle {
    url: String,
    poster: JsonPoster,
}

impl HttpOracle {
    /// `route` is appended to `base`, e.g. `/classify`.
    pub fn new(base: &str, route: &str, timeout: Duration) -> Result<Self, OracleError> {
        validate_url(base).map_err(OracleError::Endpoint)?;
        Ok(Self {
            url: format!("{}{route}", base.trim_end_matches('/')),
            poster: JsonPoster::new(timeout),
        })
    }
}

impl OracleTransport for HttpOracle {
    fn post(&self, payload: &Value) -> Result<Value, CallError> {
        self.poster.post(&self.url, payload, None)
    }
}

fn cache_key(kind: &str, endpoint: &str, payload: &Value) -> String {
    let canonical = json!({ "kind": kind, "endpoint": endpoint, "payload": payload });
    hex::encode(Sha256::digest(
        serde_json::to_vec(&canonical).expect("payload serializes"),
    ))
}

struct Plumbing {
    transport: Arc<dyn OracleTransport>,
    cache: Arc<ResponseCache>,
    retry: RetryPolicy,
    limit: InFlightLimit,
    network_calls: AtomicUsize,
}

impl Plumbing {
    fn call(&self, payload: &Value) -> Result<Value, OracleError> {
        let _slot = self.limit.acquire();
        self.retry
            .run(|_| {
                self.network_calls.fetch_add(1, Ordering::Relaxed);
                self.transport.post(payload)
            })
            .map_err(|e| OracleError::Backend(BackendError::from_retry(e)))
    }
}

pub struct ClassifierClient {
    endpoint: ClassifierEndpoint,
    io: Plumbing,
}

impl std::fmt::Debug for ClassifierClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierClient")
            .field("endpoint", &self.endpoint.endpoint)
            .finish()
    }
}

pub fn classify_payload(input: &SampleInput) -> Value {
    match input {
        SampleInput::Text { text } => json!({ "text": text }),
        SampleInput::Pair {
            premise,
            hypothesis,
        } => json!({ "premise": premise, "hypothesis": hypothesis }),
    }
}

impl ClassifierClient {
    pub fn new(
        endpoint: ClassifierEndpoint,
        transport: Arc<dyn OracleTransport>,
        cache: Arc<ResponseCache>,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Self {
        Self {
            endpoint,
            io: Plumbing {
                transport,
                cache,
                retry,
                limit: InFlightLimit::new(max_in_flight),
                network_calls: AtomicUsize::new(0),
            },
        }
    }

    pub fn http(
        endpoint: ClassifierEndpoint,
        cache: Arc<ResponseCache>,
        retry: RetryPolicy,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Result<Self, OracleError> {
        let transport = Arc::new(HttpOracle::new(&endpoint.endpoint, "/classify", timeout)?);
        Ok(Self::new(endpoint, transport, cache, retry, max_in_flight))
    }

    pub fn endpoint(&self) -> &ClassifierEndpoint {
        &self.endpoint
    }

    pub fn network_calls(&self) -> usize {
        self.io.network_calls.load(Ordering::Relaxed)
    }

    pub fn classify(&self, input: &SampleInput) -> Result<PredictedLabel, OracleError> {
        let empty = match input {
            SampleInput::Text { text } => text.trim().is_empty(),
            SampleInput::Pair {
                premise,
                hypothesis,
            } => premise.trim().is_empty() || hypothesis.trim().is_empty(),
        };
        if empty {
            return Err(OracleError::EmptyInput);
        }
        let payload = classify_payload(input);
        let key = cache_key("classify", &self.endpoint.endpoint, &payload);
        if let Some(cached) = self.io.cache.get(&key) {
            return self.parse(&cached);
        }
        let response = self.io.call(&payload)?;
        let predicted = self.parse(&response)?;
        self.io
            .cache
            .put(&key, payload, response)
            .map_err(BackendError::from)?;
        Ok(predicted)
    }

    fn parse(&self, response: &Value) -> Result<PredictedLabel, OracleError> {
        let label = response
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| OracleError::InvalidResponse("missing string field 'label'".into()))?;
        let scores = match response.get("scores") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value::<Vec<f64>>(v.clone())
                    .map_err(|e| OracleError::InvalidResponse(format!("scores: {e}")))?,
            ),
        };
        PredictedLabel::new(label, scores, &self.endpoint.labels).map_err(|e| match e {
            DomainError::UnknownLabel(raw) => OracleError::UnknownLabel(raw),
            other => OracleError::InvalidResponse(other.to_string()),
        })
    }
}

pub struct EmbeddingClient {
    endpoint: String,
    max_batch: usize,
    io: Plumbing,
}

impl std::fmt::Debug for EmbeddingClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingClient")
            .field("endpoint", &self.endpoint)
            .finish()
    }
}

impl EmbeddingClient {
    pub fn new(
        endpoint: impl Into<String>,
        transport: Arc<dyn OracleTransport>,
        cache: Arc<ResponseCache>,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            max_batch: 32,
            io: Plumbing {
                transport,
                cache,
                retry,
                limit: InFlightLimit::new(max_in_flight),
                network_calls: AtomicUsize::new(0),
            },
        }
    }

    pub fn http(
        endpoint: &str,
        cache: Arc<ResponseCache>,
        retry: RetryPolicy,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Result<Self, OracleError> {
        let transport = Arc::new(HttpOracle::new(endpoint, "/embed", timeout)?);
        Ok(Self::new(endpoint, transport, cache, retry, max_in_flight))
    }

    pub fn network_calls(&self) -> usize {
        self.io.network_calls.load(Ordering::Relaxed)
    }

    /// One unit vector per text, in input order. Each text is cached on its
    /// own, so a vector never depends on the rest of the batch.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError> {
        if texts.is_empty() {
            return Err(OracleError::EmptyBatch);
        }
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(OracleError::EmptyInput);
        }
        let keys: Vec<String> = texts
            .iter()
            .map(|t| cache_key("embed", &self.endpoint, &json!(t)))
            .collect();
        let mut found: HashMap<&str, EmbeddingVector> = HashMap::new();
        let mut missing: Vec<(&str, &String)> = Vec::new();
        for (key, text) in keys.iter().zip(texts) {
            if found.contains_key(key.as_str()) || missing.iter().any(|(k, _)| k == key) {
                continue;
            }
            match self.io.cache.get(key) {
                Some(cached) => {
                    found.insert(key, parse_vector(&cached, None)?);
                }
                None => missing.push((key, text)),
            }
        }
        for chunk in missing.chunks(self.max_batch) {
            let batch: Vec<&String> = chunk.iter().map(|(_, t)| *t).collect();
            let response = self.io.call(&json!({ "texts": batch }))?;
            let vectors = response
                .get("vectors")
                .and_then(Value::as_array)
                .ok_or_else(|| OracleError::InvalidResponse("missing array 'vectors'".into()))?;
            if vectors.len() != chunk.len() {
                return Err(OracleError::InvalidResponse(format!(
                    "asked for {} vectors, got {}",
                    chunk.len(),
                    vectors.len()
                )));
            }
            let dim = response
                .get("dim")
                .and_then(Value::as_u64)
                .map(|d| d as usize);
            for ((key, text), raw) in chunk.iter().zip(vectors) {
                // Raw values are cached so a hit normalizes exactly like a miss.
                let entry = json!({ "vector": raw });
                let vector = parse_vector(&entry, dim)?;
                self.io
                    .cache
                    .put(key, json!(text), entry)
                    .map_err(BackendError::from)?;
                found.insert(key, vector);
            }
        }
        let out: Vec<EmbeddingVector> = keys.iter().map(|k| found[k.as_str()].clone()).collect();
        let expected = out[0].dimension();
        if let Some(bad) = out.iter().find(|v| v.dimension() != expected) {
            return Err(OracleError::DimensionMismatch {
                expected,
                got: bad.dimension(),
            });
        }
        Ok(out)
    }
}

fn parse_vector(entry: &Value, dim: Option<usize>) -> Result<EmbeddingVector, OracleError> {
    let values: Vec<f64> = entry
        .get("vector")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| OracleError::InvalidResponse(format!("vector: {e}")))?
        .ok_or_else(|| OracleError::InvalidResponse("missing vector".into()))?;
    if let Some(dim) = dim {
        if values.len() != dim {
            return Err(OracleError::DimensionMismatch {
                expected: dim,
                got: values.len(),
            });
        }
    }
    EmbeddingVector::normalized(values)
}

/// In-process oracles with deterministic answers.
pub mod stub {
    use super::*;

    type LabelFn = Box<dyn Fn(&SampleInput) -> Value + Send + Sync>;

    /// Classifier answering through a closure that receives the decoded
    /// request and returns the JSON response body.
    pub struct StubClassifier {
        respond: LabelFn,
    }

    impl StubClassifier {
        pub fn new(respond: impl Fn(&SampleInput) -> Value + Send + Sync + 'static) -> Self {
            Self {
                respond: Box::new(respond),
            }
        }

        /// First keyword found in the lowercased text decides the label,
        /// else `default`. Pairs are matched on the hypothesis.
        pub fn keywords(rules: Vec<(String, String)>, default: impl Into<String>) -> Self {
            let default = default.into();
            Self::new(move |input| {
                let haystack = match input {
                    SampleInput::Text { text } => text.to_lowercase(),
                    SampleInput::Pair { hypothesis, .. } => hypothesis.to_lowercase(),
                };
                let label = rules
                    .iter()
                    .find(|(kw, _)| haystack.contains(kw.as_str()))
                    .map_or(default.as_str(), |(_, l)| l.as_str());
                json!({ "label": label })
            })
        }
    }

    impl OracleTransport for StubClassifier {
        fn post(&self, payload: &Value) -> Result<Value, CallError> {
            let input = if let Some(text) = payload.get("text").and_then(Value::as_str) {
                SampleInput::text(text)
            } else {
                match (
                    payload.get("premise").and_then(Value::as_str),
                    payload.get("hypothesis").and_then(Value::as_str),
                ) {
                    (Some(p), Some(h)) => SampleInput::pair(p, h),
                    _ => {
                        return Err(CallError::Status {
                            status: 400,
                            body: "malformed classify request".into(),
                        })
                    }
                }
            };
            Ok((self.respond)(&input))
        }
    }

    /// Feature-hashing bag of words plus a constant bias component, so no
    /// text maps to the zero vector. Output is deliberately unnormalized.
    pub struct HashingEmbedder {
        dim: usize,
    }

    impl HashingEmbedder {
        pub fn new(dim: usize) -> Self {
            assert!(dim >= 2, "need room for the bias component");
            Self { dim }
        }

        pub fn vector(&self, text: &str) -> Vec<f64> {
            let mut v = vec![0.0; self.dim];
            v[0] = 1.0;
            for token in text
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
            {
                let digest = Sha256::digest(token.to_lowercase().as_bytes());
                let mut idx = [0u8; 8];
                idx.copy_from_slice(&digest[..8]);
                let slot = 1 + (u64::from_le_bytes(idx) % (self.dim as u64 - 1)) as usize;
                v[slot] += if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            }
            v
        }
    }

    impl OracleTransport for HashingEmbedder {
        fn post(&self, payload: &Value) -> Result<Value, CallError> {
            let texts: Vec<String> = payload
                .get("texts")
                .cloned()
                .and_then(|v| serde_json::from_value(v).ok())
                .ok_or_else(|| CallError::Status {
                    status: 400,
                    body: "malformed embed request".into(),
                })?;
            let vectors: Vec<Vec<f64>> = texts.iter().map(|t| self.vector(t)).collect();
            Ok(json!({ "vectors": vectors, "dim": self.dim }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stub::{HashingEmbedder, StubClassifier};
    use super::*;
    use crate::domain::TaskSpec;
    use proptest::prelude::*;

    fn classifier(transport: impl OracleTransport + 'static) -> ClassifierClient {
        ClassifierClient::new(
            ClassifierEndpoint {
                endpoint: "http://stub".into(),
                task_id: "imdb".into(),
                labels: TaskSpec::imdb().labels,
            },
            Arc::new(transport),
            Arc::new(ResponseCache::in_memory()),
            RetryPolicy::no_delay(3),
            4,
        )
    }

    fn embedder() -> EmbeddingClient {
        EmbeddingClient::new(
            "http://stub",
            Arc::new(HashingEmbedder::new(16)),
            Arc::new(ResponseCache::in_memory()),
            RetryPolicy::no_delay(3),
            4,
        )
    }

    #[test]
    fn scripted_classifier() {
        let c = classifier(StubClassifier::new(|input| {
            let label = if input.flatten() == "Great film." {
                "positive"
            } else {
                "negative"
            };
            json!({ "label": label })
        }));
        assert_eq!(
            c.classify(&SampleInput::text("Great film.")).unwrap().label,
            "positive"
        );
        assert!(matches!(
            c.classify(&SampleInput::text("  ")),
            Err(OracleError::EmptyInput)
        ));
    }

    #[test]
    fn canonicalizes_service_labels() {
        let c = classifier(StubClassifier::new(
            |_| json!({ "label": "POSITIVE", "scores": [0.02, 0.98] }),
        ));
        let p = c.classify(&SampleInput::text("x")).unwrap();
        assert_eq!(p.label, "positive");
        assert_eq!(p.scores, Some(vec![0.02, 0.98]));
    }

    #[test]
    fn rejects_unknown_labels() {
        let c = classifier(StubClassifier::new(|_| json!({ "label": "joy" })));
        let err = c.classify(&SampleInput::text("x")).unwrap_err();
        assert!(matches!(err, OracleError::UnknownLabel(l) if l == "joy"));
        assert!(err_is_permanent(&c));
    }

    fn err_is_permanent(c: &ClassifierClient) -> bool {
        !c.classify(&SampleInput::text("x"))
            .unwrap_err()
            .is_retriable()
    }

    #[test]
    fn classification_is_cached() {
        let c = classifier(StubClassifier::keywords(
            vec![("good".into(), "positive".into())],
            "negative",
        ));
        let input = SampleInput::text("good stuff");
        let a = c.classify(&input).unwrap();
        let b = c.classify(&input).unwrap();
        assert_eq!(a, b);
        assert_eq!(c.network_calls(), 1);
    }

    #[test]
    fn embeddings_are_unit_and_ordered() {
        let e = embedder();
        let texts: Vec<String> = ["a b", "c", "a b c d"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let vs = e.embed(&texts).unwrap();
        assert_eq!(vs.len(), 3);
        for (v, t) in vs.iter().zip(&texts) {
            let norm: f64 = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            let direct = EmbeddingVector::normalized(HashingEmbedder::new(16).vector(t)).unwrap();
            assert_eq!(v, &direct);
        }
        let again = e.embed(&texts[..1]).unwrap();
        assert_eq!(again[0], vs[0]);
        assert_eq!(e.network_calls(), 1);
        assert!(matches!(e.embed(&[]), Err(OracleError::EmptyBatch)));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        struct Ragged;
        impl OracleTransport for Ragged {
            fn post(&self, _: &Value) -> Result<Value, CallError> {
                Ok(json!({ "vectors": [[1.0, 0.0], [1.0, 0.0, 0.0]], "dim": 2 }))
            }
        }
        let e = EmbeddingClient::new(
            "http://stub",
            Arc::new(Ragged),
            Arc::new(ResponseCache::in_memory()),
            RetryPolicy::no_delay(1),
            1,
        );
        let err = e.embed(&["a".to_string(), "b".to_string()]).unwrap_err();
        assert!(matches!(
            err,
            OracleError::DimensionMismatch {
                expected: 2,
                got: 3
            }
        ));
    }

    proptest! {
        #[test]
        fn embedding_ignores_batch_order(texts in prop::collection::vec("[a-z ]{0,12}[a-z]", 1..6), rot in 0usize..6) {
            let e = embedder();
            let forward = e.embed(&texts).unwrap();
            let mut rotated = texts.clone();
            let r = rot % texts.len();
            rotated.rotate_left(r);
            let fresh = embedder();
            let out = fresh.embed(&rotated).unwrap();
            for (i, v) in out.iter().enumerate() {
                prop_assert_eq!(v, &forward[(i + r) % texts.len()]);
            }
            for v in &forward {
                let self_sim: f64 = v.values().iter().map(|x| x * x).sum();
                prop_assert!((self_sim - 1.0).abs() < 1e-6);
            }
        }
    }
}
