//! Scripted chat transport for tests and offline runs.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::http::CallError;
use super::{ChatCall, ChatMessage, ChatTransport};

type Responder = Box<dyn Fn(&[ChatMessage]) -> Option<String> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedFailure {
    /// Looks like a dropped connection; retried by the client.
    Transient,
    /// An HTTP error status.
    Status(u16),
}

/// Answers are looked up by request fingerprint first, then by the
/// responder closure, then by call index. Failures are scheduled by call
/// index, counting every attempt including retries.
#[derive(Default)]
pub struct MockChat {
    by_fingerprint: HashMap<String, String>,
    responder: Option<Responder>,
    sequence: Vec<String>,
    fixed: Option<String>,
    failures: Vec<(Range<usize>, ScriptedFailure)>,
    calls: AtomicUsize,
    seen: Mutex<Vec<String>>,
}

impl std::fmt::Debug for MockChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockChat")
            .field("scripted", &self.by_fingerprint.len())
            .field("calls", &self.calls())
            .finish()
    }
}

impl MockChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Self {
            fixed: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn with_fingerprint(mut self, fingerprint: &str, text: impl Into<String>) -> Self {
        self.by_fingerprint
            .insert(fingerprint.to_string(), text.into());
        self
    }

    pub fn with_sequence<I, S>(mut self, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.sequence = texts.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_responder(
        mut self,
        responder: impl Fn(&[ChatMessage]) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    pub fn fail_calls(mut self, calls: Range<usize>, failure: ScriptedFailure) -> Self {
        self.failures.push((calls, failure));
        self
    }

    pub fn fail_from(self, first_call: usize, failure: ScriptedFailure) -> Self {
        self.fail_calls(first_call..usize::MAX, failure)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn seen_fingerprints(&self) -> Vec<String> {
        self.seen.lock().expect("mock lock poisoned").clone()
    }
}

impl ChatTransport for MockChat {
    fn send(&self, call: &ChatCall<'_>) -> Result<String, CallError> {
        let index = self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen
            .lock()
            .expect("mock lock poisoned")
            .push(call.fingerprint.to_string());
        if let Some((_, failure)) = self.failures.iter().find(|(r, _)| r.contains(&index)) {
            return Err(match failure {
                ScriptedFailure::Transient => {
                    CallError::Transport("scripted connection reset".into())
                }
                ScriptedFailure::Status(status) => CallError::Status {
                    status: *status,
                    body: "scripted failure".into(),
                },
            });
        }
        if let Some(text) = self.by_fingerprint.get(call.fingerprint) {
            return Ok(text.clone());
        }
        if let Some(text) = self.responder.as_ref().and_then(|r| r(call.messages)) {
            return Ok(text);
        }
        if let Some(text) = self.sequence.get(index) {
            return Ok(text.clone());
        }
        self.fixed.clone().ok_or_else(|| CallError::Status {
            status: 404,
            body: format!("no scripted response for call {index}"),
        })
    }
}
