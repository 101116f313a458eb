//! Sufficiency self-judging: prompt rendering and verdict parsing.
//!
//! The judge shows the student model a question plus a truncated reasoning
//! prefix and asks whether the prefix is already sufficient. The model's free
//! text is parsed into the binary ENOUGH / NOT_ENOUGH label; unparseable
//! output falls back to a configured default (NOT_ENOUGH unless overridden,
//! which errs toward keeping more of the trajectory).

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationRequest, Message};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("template error: {0}")]
    Config(String),
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeLabel {
    #[serde(rename = "ENOUGH")]
    Enough,
    #[serde(rename = "NOT_ENOUGH")]
    NotEnough,
}

impl std::fmt::Display for JudgeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JudgeLabel::Enough => write!(f, "ENOUGH"),
            JudgeLabel::NotEnough => write!(f, "NOT_ENOUGH"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Defaulted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub label: JudgeLabel,
    pub raw_text: String,
    pub parse_status: ParseStatus,
}

/// Total, deterministic verdict parsing.
///
/// NOT_ENOUGH is checked first because its surface form contains "ENOUGH";
/// any text containing both forms therefore parses as NOT_ENOUGH. Text with
/// neither form gets `default_label` and is marked defaulted.
pub fn parse_verdict(raw_text: &str, default_label: JudgeLabel) -> JudgeVerdict {
    let upper = raw_text.to_uppercase();
    let (label, parse_status) = if upper.contains("NOT_ENOUGH") || upper.contains("NOT ENOUGH") {
        (JudgeLabel::NotEnough, ParseStatus::Clean)
    } else if upper.contains("ENOUGH") {
        (JudgeLabel::Enough, ParseStatus::Clean)
    } else {
        (default_label, ParseStatus::Defaulted)
    };
    JudgeVerdict {
        label,
        raw_text: raw_text.to_string(),
        parse_status,
    }
}

/// A plain-text prompt template with `{{slot}}` placeholders.
///
/// Templates live in external files so prompt wording can change without a
/// rebuild; rendering fails if a placeholder is left unfilled.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    text: String,
    source: String,
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self, JudgeError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            JudgeError::Config(format!("cannot read template {}: {e}", path.display()))
        })?;
        Ok(PromptTemplate {
            text,
            source: path.display().to_string(),
        })
    }

    pub fn from_text(text: impl Into<String>) -> Self {
        PromptTemplate {
            text: text.into(),
            source: "<inline>".to_string(),
        }
    }

    /// Substitute `{{name}}` slots and reject any that remain unfilled.
    pub fn render_text(&self, slots: &[(&str, &str)]) -> Result<String, JudgeError> {
        let mut out = self.text.clone();
        for (name, value) in slots {
            out = out.replace(&format!("{{{{{name}}}}}"), value);
        }
        if let Some(pos) = out.find("{{") {
            let tail: String = out[pos..].chars().take(30).collect();
            return Err(JudgeError::Config(format!(
                "template {} has an unreplaced slot near {tail:?}",
                self.source
            )));
        }
        Ok(out)
    }

    /// Render as a single-user-message chat prompt.
    pub fn render_messages(&self, slots: &[(&str, &str)]) -> Result<Vec<Message>, JudgeError> {
        Ok(vec![Message::user(self.render_text(slots)?)])
    }
}

/// Render the prefix-sufficiency evaluation prompt.
pub fn render_eval_prompt(
    template: &PromptTemplate,
    question: &str,
    prefix_text: &str,
) -> Result<Vec<Message>, JudgeError> {
    if question.trim().is_empty() {
        return Err(JudgeError::EmptyInput("question"));
    }
    if prefix_text.trim().is_empty() {
        return Err(JudgeError::EmptyInput("prefix"));
    }
    template.render_messages(&[("question", question), ("prefix", prefix_text)])
}

/// What a sufficiency judge sees for one probe: the candidate prefix plus its
/// position within the trajectory.
#[derive(Debug, Clone, Copy)]
pub struct JudgeContext<'a> {
    pub question: &'a str,
    pub prefix_text: &'a str,
    /// 1-based index of the last sentence included in the prefix.
    pub boundary: usize,
    /// Total number of sentences in the trajectory.
    pub sentence_count: usize,
}

/// Binary sufficiency predicate driving the truncation strategies.
///
/// Calls within one search are strictly sequential (each depends on the
/// previous boundary update); implementations must be shareable so searches
/// for distinct problems can run concurrently.
pub trait SufficiencyJudge: Send + Sync {
    fn judge(&self, ctx: &JudgeContext<'_>) -> Result<JudgeVerdict, JudgeError>;
}

/// Model-backed judge: renders the evaluation prompt, generates at the
/// judging temperature, and parses the verdict.
pub struct ModelJudge {
    backend: Arc<dyn Backend>,
    template: PromptTemplate,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub default_label: JudgeLabel,
}

impl ModelJudge {
    pub fn new(backend: Arc<dyn Backend>, template: PromptTemplate) -> Self {
        ModelJudge {
            backend,
            template,
            temperature: 0.0,
            max_new_tokens: 64,
            default_label: JudgeLabel::NotEnough,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_default_label(mut self, label: JudgeLabel) -> Self {
        self.default_label = label;
        self
    }
}

impl SufficiencyJudge for ModelJudge {
    fn judge(&self, ctx: &JudgeContext<'_>) -> Result<JudgeVerdict, JudgeError> {
        let messages = render_eval_prompt(&self.template, ctx.question, ctx.prefix_text)?;
        let mut request = GenerationRequest::new(messages);
        request.temperature = self.temperature;
        request.max_new_tokens = self.max_new_tokens;
        let result = self.backend.complete(&request)?;
        let verdict = parse_verdict(&result.text, self.default_label);
        if verdict.parse_status == ParseStatus::Defaulted {
            tracing::debug!(boundary = ctx.boundary, raw = %result.text, "judge verdict defaulted");
        }
        Ok(verdict)
    }
}

/// Oracle judge for tests and calibration runs: ENOUGH iff the probed
/// boundary is at or past a fixed threshold, the ideal monotone judge.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdOracle {
    pub threshold: usize,
}

impl ThresholdOracle {
    pub fn new(threshold: usize) -> Self {
        ThresholdOracle { threshold }
    }
}

impl SufficiencyJudge for ThresholdOracle {
    fn judge(&self, ctx: &JudgeContext<'_>) -> Result<JudgeVerdict, JudgeError> {
        let label = if ctx.boundary >= self.threshold {
            JudgeLabel::Enough
        } else {
            JudgeLabel::NotEnough
        };
        Ok(JudgeVerdict {
            label,
            raw_text: String::new(),
            parse_status: ParseStatus::Clean,
        })
    }
}

/// Adapter for closure-based judges in tests.
pub struct FnJudge<F>(pub F);

impl<F> SufficiencyJudge for FnJudge<F>
where
    F: Fn(&JudgeContext<'_>) -> JudgeLabel + Send + Sync,
{
    fn judge(&self, ctx: &JudgeContext<'_>) -> Result<JudgeVerdict, JudgeError> {
        Ok(JudgeVerdict {
            label: (self.0)(ctx),
            raw_text: String::new(),
            parse_status: ParseStatus::Clean,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    #[test]
    fn verdict_direct_matches() {
        let v = parse_verdict(
            "NOT_ENOUGH — the prefix stops before the key step",
            JudgeLabel::NotEnough,
        );
        assert_eq!(v.label, JudgeLabel::NotEnough);
        assert_eq!(v.parse_status, ParseStatus::Clean);

        let v = parse_verdict("I believe this is ENOUGH.", JudgeLabel::NotEnough);
        assert_eq!(v.label, JudgeLabel::Enough);
        assert_eq!(v.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn verdict_default_applies() {
        let v = parse_verdict("Unsure.", JudgeLabel::NotEnough);
        assert_eq!(v.label, JudgeLabel::NotEnough);
        assert_eq!(v.parse_status, ParseStatus::Defaulted);

        let v = parse_verdict("…", JudgeLabel::Enough);
        assert_eq!(v.label, JudgeLabel::Enough);
        assert_eq!(v.parse_status, ParseStatus::Defaulted);
    }

    #[test]
    fn not_enough_takes_precedence() {
        let v = parse_verdict("ENOUGH? No: NOT ENOUGH.", JudgeLabel::NotEnough);
        assert_eq!(v.label, JudgeLabel::NotEnough);
        // lowercase and underscore forms too
        let v = parse_verdict("this is enough but also not_enough", JudgeLabel::Enough);
        assert_eq!(v.label, JudgeLabel::NotEnough);
    }

    #[test]
    fn template_renders_both_slots() {
        let t = PromptTemplate::from_text("Q: {{question}}\nP: {{prefix}}");
        let messages = render_eval_prompt(&t, "What is 2+2?", "We add the numbers.").unwrap();
        assert_eq!(messages.len(), 1);
        assert!(messages[0].content.contains("What is 2+2?"));
        assert!(messages[0].content.contains("We add the numbers."));
    }

    #[test]
    fn unreplaced_slot_is_an_error() {
        let t = PromptTemplate::from_text("Q: {{question}} A: {{answer}}");
        let err = t.render_text(&[("question", "x")]).unwrap_err();
        assert!(matches!(err, JudgeError::Config(_)));
    }

    #[test]
    fn empty_prefix_is_a_precondition_error() {
        let t = PromptTemplate::from_text("{{question}} {{prefix}}");
        assert!(matches!(
            render_eval_prompt(&t, "q", "  "),
            Err(JudgeError::EmptyInput("prefix"))
        ));
    }

    #[test]
    fn model_judge_parses_mock_output() {
        let backend = Arc::new(MockBackend::constant("ENOUGH"));
        let judge = ModelJudge::new(backend, PromptTemplate::from_text("{{question}} {{prefix}}"));
        let verdict = judge
            .judge(&JudgeContext {
                question: "q",
                prefix_text: "step7 happened",
                boundary: 3,
                sentence_count: 10,
            })
            .unwrap();
        assert_eq!(verdict.label, JudgeLabel::Enough);
    }

    #[test]
    fn threshold_oracle_is_monotone() {
        let oracle = ThresholdOracle::new(7);
        let ctx = |p| JudgeContext {
            question: "q",
            prefix_text: "t",
            boundary: p,
            sentence_count: 12,
        };
        assert_eq!(oracle.judge(&ctx(6)).unwrap().label, JudgeLabel::NotEnough);
        assert_eq!(oracle.judge(&ctx(7)).unwrap().label, JudgeLabel::Enough);
        assert_eq!(oracle.judge(&ctx(12)).unwrap().label, JudgeLabel::Enough);
    }
}
