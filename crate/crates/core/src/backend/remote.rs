//! OpenAI-compatible chat-completions client.
//!
//! POSTs to `{base_url}/v1/chat/completions` with bearer auth taken from an
//! environment variable. Transient failures (connection errors, HTTP 429/5xx)
//! are retried with capped exponential backoff and full jitter; other 4xx
//! responses fail immediately. At most `max_in_flight` requests are
//! outstanding at any instant.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendError, CallStats, GenerationRequest, GenerationResult, Message, Semaphore,
    TokenAlternative, TokenLogprob, Usage,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1_000,
            multiplier: 2.0,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Full-jitter delay before attempt `attempt + 1` (0-based failed attempt).
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay_ms as f64 * self.multiplier.powi(attempt as i32);
        let capped = exp.min(self.max_delay_ms as f64);
        let jittered = capped * rand::random::<f64>();
        Duration::from_millis(jittered as u64)
    }
}

/// How `score_tokens` is realized against the remote endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Scoring unsupported; `score_tokens` returns `UnsupportedCapability`.
    None,
    /// Use `/v1/completions` with `echo: true, max_tokens: 0` and slice the
    /// echoed logprobs after the context (vLLM-style scoring).
    CompletionsEcho,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key; unset or missing
    /// means no auth header.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub scoring: ScoringMode,
    /// Alternatives requested per token when scoring.
    pub scoring_top_logprobs: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: String::new(),
            model: String::new(),
            api_key_env: None,
            max_in_flight: 4,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            scoring: ScoringMode::None,
            scoring_top_logprobs: 5,
        }
    }
}

// ---- wire types -----------------------------------------------------------

#[derive(Serialize)]
struct ChatRequestWire<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponseWire {
    choices: Vec<ChatChoiceWire>,
    #[serde(default)]
    usage: Option<UsageWire>,
}

#[derive(Deserialize)]
struct ChatChoiceWire {
    message: ChatMessageWire,
    #[serde(default)]
    logprobs: Option<ChatLogprobsWire>,
}

#[derive(Deserialize)]
struct ChatMessageWire {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobsWire {
    #[serde(default)]
    content: Option<Vec<ChatTokenWire>>,
}

#[derive(Deserialize)]
struct ChatTokenWire {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<ChatAltWire>,
}

#[derive(Deserialize)]
struct ChatAltWire {
    token: String,
    logprob: f64,
}

#[derive(Deserialize, Default)]
struct UsageWire {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Serialize)]
struct CompletionsRequestWire<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    echo: bool,
    logprobs: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionsResponseWire {
    choices: Vec<CompletionsChoiceWire>,
}

#[derive(Deserialize)]
struct CompletionsChoiceWire {
    #[serde(default)]
    logprobs: Option<CompletionsLogprobsWire>,
}

#[derive(Deserialize)]
struct CompletionsLogprobsWire {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<std::collections::HashMap<String, f64>>>>,
    text_offset: Vec<usize>,
}

// ---------------------------------------------------------------------------

enum AttemptOutcome {
    Success { body: String },
    Retryable(String),
    Fatal(BackendError),
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
    stats: Mutex<CallStats>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        if config.base_url.is_empty() {
            return Err(BackendError::Config("base_url must not be empty".into()));
        }
        if config.model.is_empty() {
            return Err(BackendError::Config("model must not be empty".into()));
        }
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(RemoteBackend {
            in_flight: Semaphore::new(config.max_in_flight),
            api_key,
            client,
            config,
            stats: Mutex::new(CallStats::default()),
        })
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn one_attempt(&self, url: &str, body: &serde_json::Value) -> AttemptOutcome {
        let mut builder = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => return AttemptOutcome::Retryable(format!("transport: {e}")),
        };
        let status = response.status().as_u16();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => return AttemptOutcome::Retryable(format!("body read: {e}")),
        };
        match status {
            200..=299 => AttemptOutcome::Success { body: text },
            429 | 500..=599 => AttemptOutcome::Retryable(format!("HTTP {status}: {text}")),
            _ => {
                if is_context_overflow(&text) {
                    AttemptOutcome::Fatal(BackendError::ContextOverflow)
                } else {
                    AttemptOutcome::Fatal(BackendError::Http { status, body: text })
                }
            }
        }
    }

    /// Run the retry loop; either way the attempt count comes back so the
    /// caller can record it exactly once.
    fn post_with_retries(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> (Result<String, BackendError>, u32) {
        let max = self.config.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 0..max {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.delay(attempt - 1));
            }
            match self.one_attempt(url, body) {
                AttemptOutcome::Success { body } => return (Ok(body), attempt + 1),
                AttemptOutcome::Retryable(err) => {
                    tracing::warn!(attempt = attempt + 1, %err, "retryable backend failure");
                    last_error = err;
                }
                AttemptOutcome::Fatal(err) => return (Err(err), attempt + 1),
            }
        }
        (
            Err(BackendError::AttemptsExhausted {
                attempts: max,
                last_error,
            }),
            max,
        )
    }

    fn record(&self, attempts: u32, latency_ms: u64, usage: Usage) {
        let mut stats = self.stats.lock().unwrap();
        stats.calls += 1;
        stats.attempts += attempts as u64;
        stats.prompt_tokens += usage.prompt_tokens;
        stats.completion_tokens += usage.completion_tokens;
        stats.total_latency_ms += latency_ms;
    }
}

fn parse_chat_response(text: &str) -> Result<GenerationResult, BackendError> {
    let parsed: ChatResponseWire =
        serde_json::from_str(text).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::MalformedResponse("no choices in response".into()))?;
    let token_logprobs = choice.logprobs.and_then(|lp| lp.content).map(|entries| {
        entries
            .into_iter()
            .map(|t| TokenLogprob {
                token: t.token,
                logprob: t.logprob,
                top_alternatives: t
                    .top_logprobs
                    .into_iter()
                    .map(|a| TokenAlternative { token: a.token, logprob: a.logprob })
                    .collect(),
            })
            .collect()
    });
    let usage_wire = parsed.usage.unwrap_or_default();
    Ok(GenerationResult {
        text: choice.message.content.unwrap_or_default(),
        token_logprobs,
        usage: Usage {
            prompt_tokens: usage_wire.prompt_tokens,
            completion_tokens: usage_wire.completion_tokens,
        },
    })
}

fn is_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded")
        || lower.contains("maximum context length")
        || lower.contains("context window")
}

fn request_digest(body: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(body.to_string().as_bytes());
    let digest = hasher.finalize();
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

impl Backend for RemoteBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let wire = ChatRequestWire {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_new_tokens,
            logprobs: request.top_logprobs > 0,
            top_logprobs: (request.top_logprobs > 0).then_some(request.top_logprobs),
            seed: request.seed,
        };
        let body = serde_json::to_value(&wire)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let digest = request_digest(&body);
        let url = self.endpoint("/v1/chat/completions");

        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let (outcome, attempts) = self.post_with_retries(&url, &body);
        let latency_ms = started.elapsed().as_millis() as u64;
        let text = match outcome {
            Ok(text) => text,
            Err(err) => {
                self.record(attempts, latency_ms, Usage::default());
                return Err(err);
            }
        };

        let result = parse_chat_response(&text);
        let usage = result.as_ref().map(|r| r.usage).unwrap_or_default();
        self.record(attempts, latency_ms, usage);
        tracing::debug!(
            digest,
            attempts,
            latency_ms,
            prompt_tokens = usage.prompt_tokens,
            completion_tokens = usage.completion_tokens,
            "chat completion finished"
        );
        result
    }

    fn score_tokens(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        if self.config.scoring != ScoringMode::CompletionsEcho {
            return Err(BackendError::UnsupportedCapability(
                "remote backend configured without a scoring mode".into(),
            ));
        }
        let prompt = format!("{context}{continuation}");
        let wire = CompletionsRequestWire {
            model: &self.config.model,
            prompt: &prompt,
            max_tokens: 0,
            echo: true,
            logprobs: self.config.scoring_top_logprobs,
            temperature: 0.0,
        };
        let body = serde_json::to_value(&wire)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let url = self.endpoint("/v1/completions");

        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let (outcome, attempts) = self.post_with_retries(&url, &body);
        self.record(attempts, started.elapsed().as_millis() as u64, Usage::default());
        let text = outcome?;

        let parsed: CompletionsResponseWire = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let logprobs = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| {
                BackendError::MalformedResponse("scoring response carries no logprobs".into())
            })?;
        if logprobs.tokens.len() != logprobs.token_logprobs.len()
            || logprobs.tokens.len() != logprobs.text_offset.len()
        {
            return Err(BackendError::MalformedResponse(
                "logprob arrays have mismatched lengths".into(),
            ));
        }
        let boundary = context.len();
        let mut entries = Vec::new();
        for (i, token) in logprobs.tokens.iter().enumerate() {
            if logprobs.text_offset[i] < boundary {
                continue;
            }
            let top_alternatives = logprobs
                .top_logprobs
                .as_ref()
                .and_then(|tl| tl.get(i))
                .and_then(|m| m.as_ref())
                .map(|m| {
                    let mut alts: Vec<TokenAlternative> = m
                        .iter()
                        .map(|(tok, lp)| TokenAlternative { token: tok.clone(), logprob: *lp })
                        .collect();
                    alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
                    alts
                })
                .unwrap_or_default();
            entries.push(TokenLogprob {
                token: token.clone(),
                logprob: logprobs.token_logprobs[i].unwrap_or(0.0),
                top_alternatives,
            });
        }
        Ok(entries)
    }

    fn stats(&self) -> CallStats {
        *self.stats.lock().unwrap()
    }
}
