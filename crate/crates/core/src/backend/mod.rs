//! Uniform model-inference abstraction.
//!
//! [`Backend`] exposes chat-style text generation and token-logprob scoring.
//! Two implementations ship: [`RemoteBackend`], an OpenAI-compatible HTTP
//! client with retries and an in-flight cap, and [`MockBackend`], a scripted
//! deterministic stand-in that makes every end-to-end test reproducible.

mod mock;
mod remote;
mod semaphore;

pub use mock::{MockBackend, MockRule, MockScript, Schedule};
pub use remote::{RemoteBackend, RemoteConfig, RetryPolicy, ScoringMode};
pub(crate) use semaphore::Semaphore;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("all {attempts} attempts failed; last error: {last_error}")]
    AttemptsExhausted { attempts: u32, last_error: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("prompt exceeds the endpoint's context window")]
    ContextOverflow,
    #[error("backend cannot score tokens: {0}")]
    UnsupportedCapability(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

/// One generation call. `top_logprobs` is the number of alternatives requested
/// per emitted token (0 disables logprobs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub top_logprobs: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        GenerationRequest {
            messages,
            temperature: 0.0,
            max_new_tokens: 1024,
            top_logprobs: 0,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(BackendError::InvalidRequest(
                "at least one user message is required".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be > 0".into()));
        }
        if self.top_logprobs > 20 {
            return Err(BackendError::InvalidRequest(format!(
                "top_logprobs must be <= 20, got {}",
                self.top_logprobs
            )));
        }
        Ok(())
    }

    /// All message contents joined; what mock rules match against.
    pub fn joined_content(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    pub top_alternatives: Vec<TokenAlternative>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
}

/// Aggregate call accounting; totals are exact sums over completed calls.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CallStats {
    pub calls: u64,
    pub attempts: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_latency_ms: u64,
}

/// A model endpoint. Implementations must be shareable across worker threads;
/// any in-flight limiting happens inside the implementation.
pub trait Backend: Send + Sync {
    /// Run one chat completion.
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// Score `continuation` token by token, conditioned on `context`.
    /// One entry per continuation token, in order.
    fn score_tokens(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError>;

    fn stats(&self) -> CallStats;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).complete(request)
    }
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        (**self).score_tokens(context, continuation)
    }
    fn stats(&self) -> CallStats {
        (**self).stats()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).complete(request)
    }
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        (**self).score_tokens(context, continuation)
    }
    fn stats(&self) -> CallStats {
        (**self).stats()
    }
}
