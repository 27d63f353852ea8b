//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

use fizle_core::campaign::{CampaignMode, RunConfig};
use fizle_core::domain::TaskSpec;
use fizle_core::llm_backend::{BackendSpec, ChatMessage, RetryPolicy};
use fizle_core::oracle_clients::stub::HashingEmbedder;
use fizle_core::scripted;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compare `actual` with a golden file; `UPDATE_GOLDEN=1` rewrites it.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path)
        .map_err(|e| format!("{}: {e} (run with UPDATE_GOLDEN=1 to create)", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{name} differs from golden:\n--- golden\n{expected}\n--- actual\n{actual}"))
    }
}

pub fn mock_backend() -> BackendSpec {
    BackendSpec::new("mock", "http://mock.invalid/v1/chat/completions", "scripted-rewriter").unwrap()
}

/// Config for a scripted run of a fixture dataset, with the dataset copied
/// into `root` so paths are the same across runs up to `root`.
pub fn scripted_config(root: &Path, dataset: &str, mode: CampaignMode, run: &str) -> RunConfig {
    let data = root.join(dataset);
    if !data.exists() {
        std::fs::copy(fixture(dataset), &data).unwrap();
    }
    let mut config = RunConfig::new(
        TaskSpec::imdb(),
        data,
        mode,
        mock_backend(),
        "http://classifier.invalid",
        "http://embedder.invalid",
        root.join(run),
    );
    config.retry = RetryPolicy::no_delay(2);
    config
}

/// Drop the fields that legitimately vary between otherwise identical
/// runs: wall-clock latency, cache provenance and timestamps.
pub fn strip_timing(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for key in ["latency_ms", "from_cache", "created_at", "updated_at"] {
                map.remove(key);
            }
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Records file with timing fields removed, one JSON line per record.
pub fn normalized_records(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let mut v: Value = serde_json::from_str(line).unwrap();
            strip_timing(&mut v);
            v.to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Manifest with timestamps removed and `root` replaced by a placeholder.
pub fn normalized_manifest(path: &Path, root: &Path) -> String {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    strip_timing(&mut v);
    v.to_string().replace(&root.display().to_string(), "<root>")
}

/// Every file below `dir`, recursively.
pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

#[derive(Default)]
pub struct ServerOptions {
    /// Bearer token the chat route demands.
    pub secret: Option<String>,
}

/// One HTTP server speaking the chat-completions, /classify and /embed
/// protocols with the scripted generator and keyword oracles behind them.
pub struct StubServer {
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
    pub port: u16,
    pub seen: Arc<Mutex<Vec<SeenRequest>>>,
    pub chat_calls: Arc<AtomicUsize>,
    /// Chat calls numbered at or above this get HTTP 503.
    pub fail_chat_from: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start(options: ServerOptions) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
        let port = server.server_addr().to_ip().unwrap().port();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let chat_calls = Arc::new(AtomicUsize::new(0));
        let fail_chat_from = Arc::new(AtomicUsize::new(usize::MAX));
        let handle = {
            let (server, seen, chat_calls, fail_from) = (
                server.clone(),
                seen.clone(),
                chat_calls.clone(),
                fail_chat_from.clone(),
            );
            std::thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let mut raw = String::new();
                    request.as_reader().read_to_string(&mut raw).unwrap();
                    let body: Value = serde_json::from_str(&raw).unwrap_or(Value::Null);
                    let authorization = request
                        .headers()
                        .iter()
                        .find(|h| h.field.equiv("Authorization"))
                        .map(|h| h.value.to_string());
                    let path = request.url().to_string();
                    seen.lock().unwrap().push(SeenRequest {
                        path: path.clone(),
                        authorization: authorization.clone(),
                        body: body.clone(),
                    });
                    let (status, reply) = match path.as_str() {
                        "/v1/chat/completions" => {
                            let index = chat_calls.fetch_add(1, Ordering::SeqCst);
                            let failing = index >= fail_from.load(Ordering::SeqCst);
                            chat_reply(&options, failing, authorization.as_deref(), &body)
                        }
                        "/classify" => classify_reply(&body),
                        "/embed" => embed_reply(&body),
                        _ => (404, json!({ "error": "not found" })),
                    };
                    let header = Header::from_bytes("Content-Type", "application/json").unwrap();
                    let _ = request.respond(
                        Response::from_string(reply.to_string())
                            .with_status_code(status)
                            .with_header(header),
                    );
                }
            })
        };
        Self {
            server,
            handle: Some(handle),
            port,
            seen,
            chat_calls,
            fail_chat_from,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://127.0.0.1:{}{path}", self.port)
    }

    /// Make chat calls fail with 503 once `n` more have been served.
    pub fn fail_chat_after(&self, n: usize) {
        let from = self.chat_calls.load(Ordering::SeqCst) + n;
        self.fail_chat_from.store(from, Ordering::SeqCst);
    }

    pub fn heal(&self) {
        self.fail_chat_from.store(usize::MAX, Ordering::SeqCst);
    }

    pub fn requests(&self, path: &str) -> Vec<SeenRequest> {
        self.seen
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.path == path)
            .cloned()
            .collect()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn chat_reply(
    options: &ServerOptions,
    failing: bool,
    authorization: Option<&str>,
    body: &Value,
) -> (u16, Value) {
    if let Some(secret) = &options.secret {
        if authorization != Some(format!("Bearer {secret}").as_str()) {
            return (401, json!({ "error": "bad credentials" }));
        }
    }
    if failing {
        return (503, json!({ "error": "overloaded" }));
    }
    let messages: Vec<ChatMessage> = match serde_json::from_value(body["messages"].clone()) {
        Ok(m) => m,
        Err(e) => return (400, json!({ "error": e.to_string() })),
    };
    match scripted::respond(&messages) {
        Some(text) => (
            200,
            json!({ "choices": [{ "index": 0, "message": { "role": "assistant", "content": text } }] }),
        ),
        None => (400, json!({ "error": "no messages" })),
    }
}

fn classify_reply(body: &Value) -> (u16, Value) {
    let text = match (body.get("text"), body.get("hypothesis")) {
        (Some(Value::String(t)), _) | (None, Some(Value::String(t))) => t.to_lowercase(),
        _ => return (400, json!({ "error": "malformed" })),
    };
    if text.trim().is_empty() {
        return (400, json!({ "error": "empty text" }));
    }
    let label = scripted::POLARITY_RULES
        .iter()
        .find(|(kw, _)| text.contains(kw))
        .map_or("negative", |(_, l)| l);
    let scores = if label == "negative" { [0.8, 0.2] } else { [0.2, 0.8] };
    (200, json!({ "label": label, "scores": scores }))
}

fn embed_reply(body: &Value) -> (u16, Value) {
    let Some(texts) = body.get("texts").and_then(Value::as_array) else {
        return (400, json!({ "error": "malformed" }));
    };
    let embedder = HashingEmbedder::new(scripted::EMBED_DIM);
    let vectors: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| embedder.vector(t.as_str().unwrap_or_default()))
        .collect();
    (200, json!({ "vectors": vectors, "dim": scripted::EMBED_DIM }))
}
