//! Prefix-selection strategies.
//!
//! The adaptive strategy binary-searches sentence boundaries against the
//! student's sufficiency judgments: probe the midpoint prefix, shrink toward
//! the front on ENOUGH, push past the midpoint on NOT_ENOUGH, stop when the
//! interval collapses. The baselines (sequential scan, fixed ratio, fixed
//! token count, positional segments, entropy-threshold, full pass-through)
//! share the same [`PrefixDecision`] record so downstream stages and analytics
//! treat them uniformly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::backend::{Backend, BackendError};
use crate::corpus::{count_tokens, prefix_by_tokens, Trajectory};
use crate::judge::{
    JudgeContext, JudgeError, JudgeLabel, ParseStatus, PromptTemplate, SufficiencyJudge,
};

#[derive(Debug, Error)]
pub enum TruncateError {
    #[error("invalid strategy parameter: {0}")]
    Config(String),
    #[error("trajectory has {m} sentences; {needed} required")]
    DegenerateTrajectory { m: usize, needed: usize },
    #[error("judge failed at probe {probe}: {source}")]
    Judge {
        probe: usize,
        #[source]
        source: JudgeError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Which third of the trajectory to use as conditioning context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Prefix,
    Middle,
    Suffix,
}

impl std::fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentKind::Prefix => write!(f, "prefix"),
            SegmentKind::Middle => write!(f, "middle"),
            SegmentKind::Suffix => write!(f, "suffix"),
        }
    }
}

/// A truncation strategy plus its parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategyKind {
    /// Adaptive binary search over self-judgments.
    Binary,
    /// Judge prefixes 1, 2, ... until the first ENOUGH.
    Sequential,
    /// Keep the first `max(1, floor(lambda * |R|))` tokens.
    FixedRatio(f64),
    /// Keep the first `min(n, |R|)` tokens (UPFT-style fixed budget).
    FixedTokens(usize),
    /// One positional third of the sentences.
    Segment(SegmentKind),
    /// Entropy-mass threshold: smallest prefix holding `tau` of total mass.
    InfoGain(f64),
    /// Pass-through: the whole trajectory.
    Full,
}

impl StrategyKind {
    /// Identifier stored in decision records and grouped on by analytics.
    pub fn id(&self) -> String {
        match self {
            StrategyKind::Binary => "binary".to_string(),
            StrategyKind::Sequential => "sequential".to_string(),
            StrategyKind::FixedRatio(l) => format!("fixed_ratio:{l}"),
            StrategyKind::FixedTokens(n) => format!("fixed_tokens:{n}"),
            StrategyKind::Segment(which) => format!("segment:{which}"),
            StrategyKind::InfoGain(t) => format!("infogain:{t}"),
            StrategyKind::Full => "full".to_string(),
        }
    }

    pub fn uses_judge(&self) -> bool {
        matches!(self, StrategyKind::Binary | StrategyKind::Sequential)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionFlag {
    /// No prefix (including the full trajectory) was judged sufficient.
    InsufficientFull,
    /// At least one judge verdict fell back to the default label.
    DefaultedVerdicts,
}

/// One judge probe: the sentence index tried and the label returned.
/// Serializes as `[p, "ENOUGH"]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry(pub usize, pub JudgeLabel);

/// The outcome of a truncation strategy on one trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefixDecision {
    pub problem_id: String,
    pub strategy: String,
    /// Last sentence index kept (sentence strategies) or token count kept
    /// (token strategies).
    pub boundary: usize,
    pub prefix_text: String,
    pub judge_calls: u32,
    pub transcript: Vec<TranscriptEntry>,
    /// Prefix tokens / trajectory tokens, in (0, 1].
    pub ratio: f64,
    #[serde(default)]
    pub flags: Vec<DecisionFlag>,
}

pub struct TruncateOptions {
    /// After binary search terminates, spend one extra judge call verifying
    /// the final prefix; if it comes back NOT_ENOUGH, fall back to the full
    /// trajectory and flag the decision.
    pub final_verification: bool,
}

impl Default for TruncateOptions {
    fn default() -> Self {
        TruncateOptions {
            final_verification: false,
        }
    }
}

fn ratio_of(prefix_text: &str, trajectory: &Trajectory) -> f64 {
    count_tokens(prefix_text) as f64 / trajectory.token_count as f64
}

fn probe(
    judge: &dyn SufficiencyJudge,
    trajectory: &Trajectory,
    question: &str,
    p: usize,
) -> Result<(JudgeLabel, ParseStatus), TruncateError> {
    let ctx = JudgeContext {
        question,
        prefix_text: trajectory.sentence_prefix(p),
        boundary: p,
        sentence_count: trajectory.sentence_count(),
    };
    let verdict = judge
        .judge(&ctx)
        .map_err(|source| TruncateError::Judge { probe: p, source })?;
    Ok((verdict.label, verdict.parse_status))
}

fn sentence_decision(
    trajectory: &Trajectory,
    strategy: &StrategyKind,
    boundary: usize,
    transcript: Vec<TranscriptEntry>,
    mut flags: Vec<DecisionFlag>,
    any_defaulted: bool,
) -> PrefixDecision {
    if any_defaulted {
        flags.push(DecisionFlag::DefaultedVerdicts);
    }
    let prefix_text = trajectory.sentence_prefix(boundary).to_string();
    PrefixDecision {
        problem_id: trajectory.problem_id.clone(),
        strategy: strategy.id(),
        boundary,
        judge_calls: transcript.len() as u32,
        ratio: ratio_of(&prefix_text, trajectory),
        prefix_text,
        transcript,
        flags,
    }
}

/// Locate the minimal sufficient prefix by binary search over sentence
/// boundaries.
///
/// Start with the interval `[1, m]`; probe the midpoint `p = (l + r) / 2`;
/// ENOUGH sets `r = p`, NOT_ENOUGH sets `l = p + 1`; terminate when `l = r`.
/// The interval shrinks every iteration for any verdict sequence, so at most
/// `ceil(log2 m)` judge calls are spent; under a monotone judge the result is
/// exactly the minimal sufficient boundary. When `m = 1` the loop body never
/// runs.
pub fn binary_search_prefix(
    trajectory: &Trajectory,
    question: &str,
    judge: &dyn SufficiencyJudge,
    options: &TruncateOptions,
) -> Result<PrefixDecision, TruncateError> {
    let m = trajectory.sentence_count();
    let mut low = 1usize;
    let mut high = m;
    let mut transcript = Vec::new();
    let mut any_defaulted = false;
    while low < high {
        let p = (low + high) / 2;
        let (label, status) = probe(judge, trajectory, question, p)?;
        transcript.push(TranscriptEntry(p, label));
        any_defaulted |= status == ParseStatus::Defaulted;
        match label {
            JudgeLabel::Enough => high = p,
            JudgeLabel::NotEnough => low = p + 1,
        }
    }
    let mut boundary = low;
    let mut flags = Vec::new();
    if options.final_verification {
        let (label, status) = probe(judge, trajectory, question, boundary)?;
        transcript.push(TranscriptEntry(boundary, label));
        any_defaulted |= status == ParseStatus::Defaulted;
        if label == JudgeLabel::NotEnough {
            boundary = m;
            flags.push(DecisionFlag::InsufficientFull);
        }
    }
    Ok(sentence_decision(
        trajectory,
        &StrategyKind::Binary,
        boundary,
        transcript,
        flags,
        any_defaulted,
    ))
}

/// Judge prefixes 1, 2, ... in order and stop at the first ENOUGH. If no
/// prefix is sufficient the full trajectory is kept and flagged.
pub fn sequential_scan_prefix(
    trajectory: &Trajectory,
    question: &str,
    judge: &dyn SufficiencyJudge,
) -> Result<PrefixDecision, TruncateError> {
    let m = trajectory.sentence_count();
    let mut transcript = Vec::new();
    let mut any_defaulted = false;
    for p in 1..=m {
        let (label, status) = probe(judge, trajectory, question, p)?;
        transcript.push(TranscriptEntry(p, label));
        any_defaulted |= status == ParseStatus::Defaulted;
        if label == JudgeLabel::Enough {
            return Ok(sentence_decision(
                trajectory,
                &StrategyKind::Sequential,
                p,
                transcript,
                Vec::new(),
                any_defaulted,
            ));
        }
    }
    Ok(sentence_decision(
        trajectory,
        &StrategyKind::Sequential,
        m,
        transcript,
        vec![DecisionFlag::InsufficientFull],
        any_defaulted,
    ))
}

fn token_decision(
    trajectory: &Trajectory,
    strategy: &StrategyKind,
    n_tokens: usize,
) -> PrefixDecision {
    let prefix_text = prefix_by_tokens(&trajectory.text, n_tokens).to_string();
    PrefixDecision {
        problem_id: trajectory.problem_id.clone(),
        strategy: strategy.id(),
        boundary: n_tokens,
        judge_calls: 0,
        ratio: ratio_of(&prefix_text, trajectory),
        prefix_text,
        transcript: Vec::new(),
        flags: Vec::new(),
    }
}

/// Keep the first `max(1, floor(lambda * |R|))` tokens; never splits a token.
pub fn fixed_ratio_prefix(
    trajectory: &Trajectory,
    lambda: f64,
) -> Result<PrefixDecision, TruncateError> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(TruncateError::Config(format!(
            "fixed-ratio lambda must lie in (0, 1), got {lambda}"
        )));
    }
    let n = ((lambda * trajectory.token_count as f64).floor() as usize).max(1);
    Ok(token_decision(
        trajectory,
        &StrategyKind::FixedRatio(lambda),
        n,
    ))
}

/// Keep the first `min(n_tokens, |R|)` tokens.
pub fn fixed_token_prefix(
    trajectory: &Trajectory,
    n_tokens: usize,
) -> Result<PrefixDecision, TruncateError> {
    if n_tokens == 0 {
        return Err(TruncateError::Config(
            "fixed-token prefix needs n_tokens >= 1".into(),
        ));
    }
    let n = n_tokens.min(trajectory.token_count);
    Ok(token_decision(
        trajectory,
        &StrategyKind::FixedTokens(n_tokens),
        n,
    ))
}

/// Sentence index ranges (1-based, inclusive) of the three positional groups.
/// Sizes differ by at most one and earlier groups are never smaller.
fn third_bounds(m: usize) -> [(usize, usize); 3] {
    let base = m / 3;
    let rem = m % 3;
    let mut bounds = [(0, 0); 3];
    let mut start = 1;
    for (i, b) in bounds.iter_mut().enumerate() {
        let size = base + usize::from(i < rem);
        *b = (start, start + size - 1);
        start += size;
    }
    bounds
}

/// The requested positional third of the trajectory, as text.
pub fn segment_slice(
    trajectory: &Trajectory,
    which: SegmentKind,
) -> Result<&str, TruncateError> {
    let m = trajectory.sentence_count();
    if m < 3 {
        return Err(TruncateError::DegenerateTrajectory { m, needed: 3 });
    }
    let bounds = third_bounds(m);
    let (a, b) = match which {
        SegmentKind::Prefix => bounds[0],
        SegmentKind::Middle => bounds[1],
        SegmentKind::Suffix => bounds[2],
    };
    Ok(trajectory.sentence_slice(a, b))
}

/// Decision wrapper around [`segment_slice`]; `boundary` is the group's last
/// sentence index. Only the `prefix` segment is a byte prefix of the text.
pub fn segment_decision(
    trajectory: &Trajectory,
    which: SegmentKind,
) -> Result<PrefixDecision, TruncateError> {
    let text = segment_slice(trajectory, which)?.to_string();
    let bounds = third_bounds(trajectory.sentence_count());
    let (_, b) = match which {
        SegmentKind::Prefix => bounds[0],
        SegmentKind::Middle => bounds[1],
        SegmentKind::Suffix => bounds[2],
    };
    Ok(PrefixDecision {
        problem_id: trajectory.problem_id.clone(),
        strategy: StrategyKind::Segment(which).id(),
        boundary: b,
        judge_calls: 0,
        ratio: ratio_of(&text, trajectory),
        prefix_text: text,
        transcript: Vec::new(),
        flags: Vec::new(),
    })
}

/// Entropy-threshold truncation: score the trajectory under the student
/// conditioned on the QA prompt, attribute per-token entropy mass to
/// sentences, and keep the smallest prefix whose cumulative mass reaches
/// `tau` of the total.
pub fn infogain_prefix(
    trajectory: &Trajectory,
    question: &str,
    backend: &dyn Backend,
    qa_template: &PromptTemplate,
    tau: f64,
) -> Result<PrefixDecision, TruncateError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(TruncateError::Config(format!(
            "infogain tau must lie in (0, 1), got {tau}"
        )));
    }
    let context = qa_template
        .render_text(&[("question", question)])
        .map_err(|e| TruncateError::Config(e.to_string()))?;
    let entries = backend.score_tokens(&context, &trajectory.text)?;
    let (entropies, _estimator) = analysis::entropy_per_token(&entries);
    let masses = analysis::sentence_entropy_mass(trajectory, &entries, &entropies);

    let total: f64 = masses.iter().sum();
    let target = tau * total;
    let mut cumulative = 0.0;
    let mut boundary = trajectory.sentence_count();
    for (i, mass) in masses.iter().enumerate() {
        cumulative += mass;
        if cumulative >= target {
            boundary = i + 1;
            break;
        }
    }
    Ok(sentence_decision(
        trajectory,
        &StrategyKind::InfoGain(tau),
        boundary,
        Vec::new(),
        Vec::new(),
        false,
    ))
}

/// Pass-through strategy: keep the whole trajectory (boundary = m).
pub fn full_prefix(trajectory: &Trajectory) -> PrefixDecision {
    sentence_decision(
        trajectory,
        &StrategyKind::Full,
        trajectory.sentence_count(),
        Vec::new(),
        Vec::new(),
        false,
    )
}

/// Everything a strategy might need; judging strategies use `judge`, the
/// entropy strategy uses `backend` + `qa_template`.
pub struct StrategyDeps<'a> {
    pub judge: Option<&'a dyn SufficiencyJudge>,
    pub backend: Option<&'a dyn Backend>,
    pub qa_template: Option<&'a PromptTemplate>,
}

/// Dispatch a strategy over one trajectory.
pub fn run_strategy(
    trajectory: &Trajectory,
    question: &str,
    strategy: &StrategyKind,
    deps: &StrategyDeps<'_>,
    options: &TruncateOptions,
) -> Result<PrefixDecision, TruncateError> {
    let need_judge = || {
        deps.judge.ok_or_else(|| {
            TruncateError::Config(format!("strategy {} needs a judge", strategy.id()))
        })
    };
    match strategy {
        StrategyKind::Binary => binary_search_prefix(trajectory, question, need_judge()?, options),
        StrategyKind::Sequential => sequential_scan_prefix(trajectory, question, need_judge()?),
        StrategyKind::FixedRatio(l) => fixed_ratio_prefix(trajectory, *l),
        StrategyKind::FixedTokens(n) => fixed_token_prefix(trajectory, *n),
        StrategyKind::Segment(which) => segment_decision(trajectory, *which),
        StrategyKind::InfoGain(tau) => {
            let backend = deps.backend.ok_or_else(|| {
                TruncateError::Config("infogain strategy needs a backend".into())
            })?;
            let qa = deps.qa_template.ok_or_else(|| {
                TruncateError::Config("infogain strategy needs the qa template".into())
            })?;
            infogain_prefix(trajectory, question, backend, qa, *tau)
        }
        StrategyKind::Full => Ok(full_prefix(trajectory)),
    }
}
