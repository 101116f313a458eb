//! Scripted deterministic mock backend.
//!
//! A script is an ordered list of rules; the first rule whose conditions all
//! hold wins. A rule can match on a prompt substring (`contains`) and/or the
//! request seed (`seed_is`), and supplies a canned completion, a per-token
//! logprob schedule, or both. A default response is mandatory so the mock is
//! total over prompts.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendError, CallStats, GenerationRequest, GenerationResult, TokenAlternative,
    TokenLogprob, Usage,
};
use crate::corpus::{count_tokens, token_spans};

/// Per-token logprob schedule; `k` is the 0-based token position.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Every token gets `value`.
    Constant { value: f64 },
    /// Token `k` gets `coefficient * k`.
    Linear { coefficient: f64 },
    /// Token `k` gets `values[k % values.len()]`.
    Values { values: Vec<f64> },
}

impl Schedule {
    fn logprob_at(&self, k: usize) -> f64 {
        match self {
            Schedule::Constant { value } => *value,
            Schedule::Linear { coefficient } => coefficient * k as f64,
            Schedule::Values { values } => values[k % values.len()],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring that must appear in the joined message contents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Substrings that must all appear in the joined message contents.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains_all: Vec<String>,
    /// Exact request seed to match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_is: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_schedule: Option<Schedule>,
    /// When > 0, each scored token also carries this many alternatives spaced
    /// `alternative_gap` apart below the scheduled logprob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_alternatives: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative_gap: Option<f64>,
}

impl MockRule {
    fn matches(&self, haystack: &str, seed: Option<u64>) -> bool {
        if let Some(ref needle) = self.contains {
            if !haystack.contains(needle.as_str()) {
                return false;
            }
        }
        if !self.contains_all.iter().all(|n| haystack.contains(n.as_str())) {
            return false;
        }
        if let Some(want) = self.seed_is {
            if seed != Some(want) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Completion used when no rule matches; mandatory.
    pub default_response: String,
    /// Schedule used by `score_tokens` when no rule provides one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_schedule: Option<Schedule>,
}

impl MockScript {
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.default_response.is_empty() {
            return Err(BackendError::Config(
                "mock script needs a non-empty default_response".into(),
            ));
        }
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.response.is_none() && rule.logprob_schedule.is_none() {
                return Err(BackendError::Config(format!(
                    "mock rule {i} has neither a response nor a logprob_schedule"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic scripted backend: identical request sequences yield identical
/// result sequences.
pub struct MockBackend {
    script: MockScript,
    calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, BackendError> {
        script.validate()?;
        Ok(MockBackend {
            script,
            calls: AtomicU64::new(0),
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
        })
    }

    pub fn from_script_file(path: &Path) -> Result<Self, BackendError> {
        Self::new(MockScript::from_file(path)?)
    }

    /// Convenience: a mock that always answers `response`.
    pub fn constant(response: impl Into<String>) -> Self {
        MockBackend::new(MockScript {
            rules: Vec::new(),
            default_response: response.into(),
            default_schedule: None,
        })
        .expect("constant script is valid")
    }

    /// Total number of `complete` + `score_tokens` calls so far.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn response_for(&self, haystack: &str, seed: Option<u64>) -> &str {
        self.script
            .rules
            .iter()
            .find(|r| r.response.is_some() && r.matches(haystack, seed))
            .and_then(|r| r.response.as_deref())
            .unwrap_or(&self.script.default_response)
    }

    fn schedule_for(&self, haystack: &str) -> Option<(&Schedule, u32, f64)> {
        for rule in &self.script.rules {
            if rule.logprob_schedule.is_some() && rule.matches(haystack, None) {
                return rule.logprob_schedule.as_ref().map(|schedule| {
                    (
                        schedule,
                        rule.top_alternatives.unwrap_or(0),
                        rule.alternative_gap.unwrap_or(0.5),
                    )
                });
            }
        }
        self.script.default_schedule.as_ref().map(|s| (s, 0, 0.5))
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let haystack = request.joined_content();
        let text = self.response_for(&haystack, request.seed).to_string();
        let usage = Usage {
            prompt_tokens: count_tokens(&haystack) as u64,
            completion_tokens: count_tokens(&text) as u64,
        };
        self.prompt_tokens.fetch_add(usage.prompt_tokens, Ordering::Relaxed);
        self.completion_tokens.fetch_add(usage.completion_tokens, Ordering::Relaxed);
        Ok(GenerationResult {
            text,
            token_logprobs: None,
            usage,
        })
    }

    fn score_tokens(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (schedule, n_alts, gap) = self.schedule_for(context).ok_or_else(|| {
            BackendError::UnsupportedCapability("mock script has no logprob schedule".into())
        })?;
        let entries = token_spans(continuation)
            .into_iter()
            .enumerate()
            .map(|(k, (start, end))| {
                let logprob = schedule.logprob_at(k).min(0.0);
                let top_alternatives = (0..n_alts)
                    .map(|j| TokenAlternative {
                        token: format!("alt{j}"),
                        logprob: logprob - gap * j as f64,
                    })
                    .collect();
                TokenLogprob {
                    token: continuation[start..end].to_string(),
                    logprob,
                    top_alternatives,
                }
            })
            .collect();
        Ok(entries)
    }

    fn stats(&self) -> CallStats {
        CallStats {
            calls: self.calls.load(Ordering::Relaxed),
            attempts: self.calls.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
            total_latency_ms: 0,
        }
    }
}
