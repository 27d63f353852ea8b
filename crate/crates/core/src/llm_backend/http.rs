use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

/// Failure of a single call to a remote service.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl CallError {
    /// Transport failures, rate limiting and server errors may succeed on
    /// a later attempt; everything else will not.
    pub fn is_retriable(&self) -> bool {
        match self {
            CallError::Transport(_) => true,
            CallError::Status { status, .. } => *status == 429 || *status == 408 || *status >= 500,
            CallError::InvalidResponse(_) | CallError::Config(_) => false,
        }
    }
}

const BODY_EXCERPT_CHARS: usize = 300;

pub(crate) fn excerpt(body: &str) -> String {
    match body.char_indices().nth(BODY_EXCERPT_CHARS) {
        Some((idx, _)) => format!("{}...", &body[..idx]),
        None => body.to_string(),
    }
}

#[derive(Clone)]
pub(crate) struct JsonPoster {
    agent: ureq::Agent,
}

impl JsonPoster {
    pub(crate) fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }

    pub(crate) fn post(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
    ) -> Result<Value, CallError> {
        let mut request = self.agent.post(url);
        if let Some(token) = bearer {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| CallError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| CallError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(CallError::Status {
                status,
                body: excerpt(&text),
            });
        }
        serde_json::from_str(&text).map_err(|e| CallError::InvalidResponse(e.to_string()))
    }
}

impl std::fmt::Debug for JsonPoster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("JsonPoster")
    }
}
