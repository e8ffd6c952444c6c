//! Blocking JSON client for remote stage services.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::protocol::*;
use super::{BackendError, Critic, Editor, Instructor, Scorer};

/// Exponential backoff between attempts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 50,
            multiplier: 2.0,
            max_backoff_ms: 2_000,
        }
    }
}

impl RetryPolicy {
    /// Delay after the failed attempt `attempt` (zero-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("retry max_attempts must be at least 1".into());
        }
        if self.multiplier.is_nan() || self.multiplier < 1.0 {
            return Err("retry multiplier must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL such as `http://127.0.0.1:8080`; the stage path is appended.
    pub base_url: String,
    #[serde(default)]
    pub bearer_token: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            bearer_token: None,
            timeout_ms: default_timeout_ms(),
        }
    }
}

const EXCERPT_LEN: usize = 256;

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

/// One remote service; implements every stage trait so it can back any stage.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: EndpointConfig,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: EndpointConfig, retry: RetryPolicy) -> Result<Self, BackendError> {
        retry.validate().map_err(BackendError::BadRequest)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self { endpoint, retry, client })
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), path)
    }

    fn attempt<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp, BackendError> {
        let mut builder = self.client.post(self.url(path)).json(req);
        if let Some(token) = &self.endpoint.bearer_token {
            builder = builder.bearer_auth(token);
        }
        let resp = builder.send().map_err(|e| self.transport_error(e))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| self.transport_error(e))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: excerpt(&body),
            });
        }
        if body.trim().is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        serde_json::from_str(&body).map_err(|e| BackendError::Malformed(format!("{e}: {}", excerpt(&body))))
    }

    fn transport_error(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(self.endpoint.timeout_ms)
        } else {
            BackendError::Unavailable(e.to_string())
        }
    }

    /// POSTs `req` to `path`, retrying transient failures with backoff.
    pub fn http_call<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp, BackendError> {
        let mut attempt = 0;
        loop {
            match self.attempt(path, req) {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_retryable() && attempt + 1 < self.retry.max_attempts => {
                    tracing::debug!(path, attempt, error = %e, "retrying backend call");
                    std::thread::sleep(self.retry.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn health(&self) -> Result<bool, BackendError> {
        let resp = self
            .client
            .get(self.url(HEALTH_PATH))
            .send()
            .map_err(|e| self.transport_error(e))?;
        if !resp.status().is_success() {
            return Ok(false);
        }
        let body: HealthResponse = resp.json().map_err(|e| BackendError::Malformed(e.to_string()))?;
        Ok(body.ok)
    }
}

impl Critic for HttpBackend {
    fn critique(&self, req: &CritiqueRequest) -> Result<CritiqueResponse, BackendError> {
        self.http_call(CRITIQUE_PATH, req)
    }
}

impl Instructor for HttpBackend {
    fn instruct(&self, req: &InstructRequest) -> Result<InstructResponse, BackendError> {
        self.http_call(INSTRUCT_PATH, req)
    }
}

impl Editor for HttpBackend {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse, BackendError> {
        self.http_call(EDIT_PATH, req)
    }
}

impl Scorer for HttpBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let resp: ScoreResponse = self.http_call(SCORE_PATH, req)?;
        if !resp.score.is_finite() {
            return Err(BackendError::Malformed("non-finite score".into()));
        }
        Ok(resp)
    }
}
