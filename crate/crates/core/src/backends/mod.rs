//! Stage backends: the wire protocol, HTTP clients, and a deterministic mock
//! suite over the vector world.

use std::sync::Arc;

pub mod http;
pub mod mock;
pub mod protocol;
pub mod server;
pub mod world;

pub use http::{EndpointConfig, HttpBackend, RetryPolicy};
pub use mock::{Informativeness, MockBackend, MockOptions};
pub use protocol::*;
pub use server::{FaultPlan, MockServer};
pub use world::{
    synth_reward, MixtureComponent, RewardFunction, RewardKind, SyntheticReward, VectorWorld,
    WorldError,
};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("backend returned status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend timed out after {0} ms")]
    Timeout(u64),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl BackendError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Unavailable(_) | Self::EmptyResponse | Self::Timeout(_) => true,
            Self::Http { status, .. } => *status >= 500 || *status == 429 || *status == 408,
            Self::Malformed(_) | Self::BadRequest(_) => false,
        }
    }
}

pub trait Critic: Send + Sync {
    fn critique(&self, req: &CritiqueRequest) -> Result<CritiqueResponse, BackendError>;
}

pub trait Instructor: Send + Sync {
    fn instruct(&self, req: &InstructRequest) -> Result<InstructResponse, BackendError>;
}

pub trait Editor: Send + Sync {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse, BackendError>;
}

pub trait Scorer: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError>;
}

/// One client per stage. The same value may back several stages.
#[derive(Clone)]
pub struct BackendSet {
    pub critic: Arc<dyn Critic>,
    pub instructor: Arc<dyn Instructor>,
    pub editor: Arc<dyn Editor>,
    pub scorer: Arc<dyn Scorer>,
}

impl BackendSet {
    pub fn uniform<B>(backend: Arc<B>) -> Self
    where
        B: Critic + Instructor + Editor + Scorer + 'static,
    {
        Self {
            critic: backend.clone(),
            instructor: backend.clone(),
            editor: backend.clone(),
            scorer: backend,
        }
    }
}

impl std::fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("BackendSet")
    }
}

/// Adapts a scoring endpoint to a [`RewardFunction`] over vectors.
pub struct ScorerReward {
    pub scorer: Arc<dyn Scorer>,
    pub label: String,
}

impl RewardFunction for ScorerReward {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn score(&self, condition: &crate::diffusion::PromptCondition, x: &[f64]) -> Result<f64, WorldError> {
        let req = ScoreRequest {
            prompt: condition.prompt_text.clone(),
            image_b64: vector_to_b64(x),
        };
        let resp = self.scorer.score(&req).map_err(|e| WorldError::Scorer(e.to_string()))?;
        if !resp.score.is_finite() {
            return Err(WorldError::Scorer("non-finite score".into()));
        }
        Ok(resp.score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_classification() {
        assert!(BackendError::Http { status: 503, body: String::new() }.is_retryable());
        assert!(!BackendError::Http { status: 404, body: String::new() }.is_retryable());
        assert!(!BackendError::Malformed("x".into()).is_retryable());
        assert!(BackendError::EmptyResponse.is_retryable());
    }
}
