//! Data model and persistence for problems, trajectories, and derived records.
//!
//! Everything downstream operates on [`Problem`] and [`Trajectory`]. A
//! trajectory's sentence spans are derived at load time by [`segment_sentences`]
//! and never stored; the JSONL schemas keep only `{problem_id, text}` and
//! `{id, question, ground_truth}`.

mod jsonl;
mod segment;
mod tokenizer;

pub use jsonl::{read_records, read_records_tolerant_tail, write_records_atomic, JsonlWriter};
pub use segment::segment_sentences;
pub use tokenizer::{count_tokens, prefix_by_tokens, token_spans};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("trajectory text is empty or whitespace-only")]
    EmptyTrajectory,
    #[error("{path}:{line}: malformed JSONL line: {message}")]
    ParseError {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: record does not match schema: {message}")]
    SchemaError {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate problem id {0:?}")]
    DuplicateId(String),
    #[error("problem {0:?} has an empty id or question")]
    InvalidProblem(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A question plus its ground-truth answer; the unit of dataset construction
/// and evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub ground_truth: String,
}

impl Problem {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.id.is_empty() || self.question.is_empty() {
            return Err(CorpusError::InvalidProblem(self.id.clone()));
        }
        Ok(())
    }
}

/// One sentence of a trajectory, as byte offsets into the trajectory text.
///
/// `start` is inclusive, `end` exclusive, and `index` is the 1-based ordinal
/// used everywhere a prefix boundary is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub index: usize,
}

/// Wire form of a trajectory: `{ "problem_id", "text" }`. Spans and token
/// counts are derived on load, not stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub problem_id: String,
    pub text: String,
}

/// A teacher-generated reasoning text segmented into sentence spans.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub problem_id: String,
    pub text: String,
    pub sentences: Vec<SentenceSpan>,
    pub token_count: usize,
}

impl Trajectory {
    /// Build a trajectory from raw teacher output.
    ///
    /// Outer whitespace is trimmed and a single leading `<think>` / trailing
    /// `</think>` delimiter pair is stripped when present (logged when it
    /// happens), so that sentence prefixes are byte prefixes of the stored
    /// text.
    pub fn from_raw(problem_id: impl Into<String>, raw: &str) -> Result<Self, CorpusError> {
        let problem_id = problem_id.into();
        let (text, stripped) = normalize_trajectory_text(raw);
        if stripped {
            tracing::debug!(problem_id, "stripped think-delimiter pair from trajectory");
        }
        let sentences = segment_sentences(&text)?;
        let token_count = count_tokens(&text);
        Ok(Trajectory {
            problem_id,
            text,
            sentences,
            token_count,
        })
    }

    pub fn from_record(record: TrajectoryRecord) -> Result<Self, CorpusError> {
        Self::from_raw(record.problem_id, &record.text)
    }

    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            problem_id: self.problem_id.clone(),
            text: self.text.clone(),
        }
    }

    /// Number of sentences, the paper-facing `m`.
    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }

    /// The text of sentences `1..=p` as a byte prefix of `text`.
    ///
    /// Inter-sentence whitespace is preserved; the slice always starts at
    /// offset 0 because construction trims outer whitespace.
    pub fn sentence_prefix(&self, p: usize) -> &str {
        assert!(p >= 1 && p <= self.sentences.len(), "prefix index out of range");
        &self.text[..self.sentences[p - 1].end]
    }

    /// The text of a single sentence span.
    pub fn sentence_text(&self, index: usize) -> &str {
        let span = &self.sentences[index - 1];
        &self.text[span.start..span.end]
    }

    /// Contiguous slice covering sentences `a..=b` (1-based, inclusive).
    pub fn sentence_slice(&self, a: usize, b: usize) -> &str {
        assert!(a >= 1 && a <= b && b <= self.sentences.len());
        &self.text[self.sentences[a - 1].start..self.sentences[b - 1].end]
    }
}

/// Trim outer whitespace and strip one leading `<think>` and/or trailing
/// `</think>` delimiter. Returns the cleaned text and whether anything was
/// stripped.
pub fn normalize_trajectory_text(raw: &str) -> (String, bool) {
    let mut text = raw.trim();
    let mut stripped = false;
    if let Some(rest) = text.strip_prefix("<think>") {
        text = rest.trim_start();
        stripped = true;
    }
    if let Some(rest) = text.strip_suffix("</think>") {
        text = rest.trim_end();
        stripped = true;
    }
    (text.to_string(), stripped)
}

/// Load problems from JSONL, enforcing id uniqueness and non-emptiness.
pub fn load_problems(path: &std::path::Path) -> Result<Vec<Problem>, CorpusError> {
    let problems: Vec<Problem> = read_records(path)?;
    let mut seen = std::collections::HashSet::new();
    for p in &problems {
        p.validate()?;
        if !seen.insert(p.id.as_str()) {
            return Err(CorpusError::DuplicateId(p.id.clone()));
        }
    }
    Ok(problems)
}

/// Load trajectories from JSONL and segment them.
pub fn load_trajectories(path: &std::path::Path) -> Result<Vec<Trajectory>, CorpusError> {
    let records: Vec<TrajectoryRecord> = read_records(path)?;
    records.into_iter().map(Trajectory::from_record).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_from_raw_strips_think_pair() {
        let t = Trajectory::from_raw("p1", "<think>First step. Second step.</think>").unwrap();
        assert_eq!(t.text, "First step. Second step.");
        assert_eq!(t.sentence_count(), 2);
    }

    #[test]
    fn sentence_prefix_is_byte_prefix() {
        let t = Trajectory::from_raw("p1", "  A is true. B follows! Done?  ").unwrap();
        for p in 1..=t.sentence_count() {
            let prefix = t.sentence_prefix(p);
            assert!(t.text.starts_with(prefix));
        }
        assert_eq!(t.sentence_prefix(t.sentence_count()), t.text);
    }

    #[test]
    fn empty_trajectory_rejected() {
        assert!(matches!(
            Trajectory::from_raw("p1", "   \n "),
            Err(CorpusError::EmptyTrajectory)
        ));
    }

    #[test]
    fn token_count_positive_for_nonempty() {
        let t = Trajectory::from_raw("p1", "x").unwrap();
        assert!(t.token_count >= 1);
    }
}
