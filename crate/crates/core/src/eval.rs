//! Pass@1 / Pass@k evaluation harness.
//!
//! Each problem gets `k` independent samples from the QA prompt; answers are
//! extracted and matched against ground truth. Pass@1 scores only the first
//! sample, Pass@k counts problems with at least one correct sample. Failed
//! samples count as incorrect and are flagged, so backend availability
//! problems depress rather than inflate scores.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{answers_match, extract_answer, normalize_answer};
use crate::backend::{Backend, GenerationRequest};
use crate::corpus::{read_records_tolerant_tail, write_records_atomic, CorpusError, JsonlWriter, Problem};
use crate::exec;
use crate::judge::{JudgeError, PromptTemplate};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Template(#[from] JudgeError),
    #[error("evaluation aborted after {0} samples (fault injection)")]
    Aborted(usize),
}

#[derive(Debug, Clone)]
pub struct EvalParams {
    pub dataset_name: String,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: u32,
    /// Base seed; sample `j` of every problem is requested with seed
    /// `base + j`, keeping samples independent yet reproducible.
    pub seed: u64,
    /// Fault-injection hook for resume tests.
    pub abort_after_samples: Option<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            dataset_name: "eval".to_string(),
            k: 3,
            temperature: 0.7,
            max_new_tokens: 4096,
            seed: 0,
            abort_after_samples: None,
        }
    }
}

/// Audit record for one (problem, sample) draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub problem_id: String,
    pub sample_index: usize,
    pub text: String,
    pub extracted_answer: Option<String>,
    pub correct: bool,
    /// True when the backend call failed; such samples are never correct.
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub text: String,
    pub extracted_answer: Option<String>,
    pub correct: bool,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemEval {
    pub problem_id: String,
    pub samples: Vec<SampleOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset_name: String,
    pub k: usize,
    pub per_problem: Vec<ProblemEval>,
    pub pass_at_1: f64,
    pub pass_at_k: f64,
}

/// Exact metric fold over per-problem records; recomputable from files.
pub fn aggregate(dataset_name: &str, k: usize, per_problem: Vec<ProblemEval>) -> EvalResult {
    let n = per_problem.len();
    let first_correct = per_problem
        .iter()
        .filter(|p| p.samples.first().is_some_and(|s| s.correct))
        .count();
    let any_correct = per_problem
        .iter()
        .filter(|p| p.samples.iter().any(|s| s.correct))
        .count();
    let pass_at_1 = if n == 0 { 0.0 } else { first_correct as f64 / n as f64 };
    let pass_at_k = if n == 0 { 0.0 } else { any_correct as f64 / n as f64 };
    debug_assert!(pass_at_1 <= pass_at_k);
    EvalResult {
        dataset_name: dataset_name.to_string(),
        k,
        per_problem,
        pass_at_1,
        pass_at_k,
    }
}

/// Evaluate `k` samples per problem, resumable per (problem, sample index).
///
/// Sample requests never include another sample's output. When
/// `samples_path` is given, per-sample records are checkpointed there and
/// reruns skip completed pairs.
pub fn evaluate(
    problems: &[Problem],
    backend: &dyn Backend,
    qa_template: &PromptTemplate,
    params: &EvalParams,
    samples_path: Option<&Path>,
) -> Result<EvalResult, EvalError> {
    let mut done: Vec<SampleRecord> = Vec::new();
    if let Some(path) = samples_path {
        let (records, _) = read_records_tolerant_tail::<SampleRecord>(path)?;
        done = records;
    }
    let done_keys: HashSet<(String, usize)> = done
        .iter()
        .map(|r| (r.problem_id.clone(), r.sample_index))
        .collect();

    let mut work: Vec<(&Problem, usize)> = Vec::new();
    for problem in problems {
        for j in 0..params.k {
            if !done_keys.contains(&(problem.id.clone(), j)) {
                work.push((problem, j));
            }
        }
    }

    let writer: Option<Mutex<JsonlWriter>> = match samples_path {
        Some(path) => Some(Mutex::new(JsonlWriter::append(path)?)),
        None => None,
    };
    let processed = std::sync::atomic::AtomicUsize::new(0);
    let io_error: Mutex<Option<CorpusError>> = Mutex::new(None);

    let outcomes: Vec<Option<SampleRecord>> = exec::par_map(work, |(problem, j)| {
        if let Some(limit) = params.abort_after_samples {
            if processed.load(std::sync::atomic::Ordering::SeqCst) >= limit {
                return None;
            }
        }
        let record = draw_sample(problem, j, backend, qa_template, params);
        if let Some(w) = &writer {
            let mut guard = io_error.lock().unwrap();
            if guard.is_none() {
                if let Err(e) = w.lock().unwrap().write(&record) {
                    *guard = Some(e);
                }
            }
        }
        processed.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Some(record)
    });

    if let Some(err) = io_error.into_inner().unwrap() {
        return Err(EvalError::Corpus(err));
    }
    let aborted = outcomes.iter().any(|o| o.is_none());
    done.extend(outcomes.into_iter().flatten());
    if aborted {
        return Err(EvalError::Aborted(
            processed.load(std::sync::atomic::Ordering::SeqCst),
        ));
    }

    // Deterministic order: problems in input order, samples by index.
    done.sort_by(|a, b| (&a.problem_id, a.sample_index).cmp(&(&b.problem_id, b.sample_index)));
    if let Some(path) = samples_path {
        write_records_atomic(path, &done)?;
    }

    let mut per_problem = Vec::with_capacity(problems.len());
    for problem in problems {
        let mut samples: Vec<&SampleRecord> =
            done.iter().filter(|r| r.problem_id == problem.id).collect();
        samples.sort_by_key(|r| r.sample_index);
        per_problem.push(ProblemEval {
            problem_id: problem.id.clone(),
            samples: samples
                .into_iter()
                .map(|r| SampleOutcome {
                    text: r.text.clone(),
                    extracted_answer: r.extracted_answer.clone(),
                    correct: r.correct,
                    failed: r.failed,
                })
                .collect(),
        });
    }
    Ok(aggregate(&params.dataset_name, params.k, per_problem))
}

fn draw_sample(
    problem: &Problem,
    sample_index: usize,
    backend: &dyn Backend,
    qa_template: &PromptTemplate,
    params: &EvalParams,
) -> SampleRecord {
    let messages = match qa_template.render_messages(&[("question", problem.question.as_str())]) {
        Ok(m) => m,
        Err(e) => {
            return SampleRecord {
                problem_id: problem.id.clone(),
                sample_index,
                text: String::new(),
                extracted_answer: None,
                correct: false,
                failed: true,
            }
            .tap_warn(&problem.id, &e.to_string());
        }
    };
    let mut request = GenerationRequest::new(messages);
    request.temperature = params.temperature;
    request.max_new_tokens = params.max_new_tokens;
    request.seed = Some(params.seed + sample_index as u64);
    match backend.complete(&request) {
        Ok(result) => {
            let extracted = extract_answer(&result.text);
            let correct = extracted
                .as_deref()
                .is_some_and(|ans| answers_match(ans, &normalize_answer(&problem.ground_truth)));
            SampleRecord {
                problem_id: problem.id.clone(),
                sample_index,
                text: result.text,
                extracted_answer: extracted,
                correct,
                failed: false,
            }
        }
        Err(e) => SampleRecord {
            problem_id: problem.id.clone(),
            sample_index,
            text: String::new(),
            extracted_answer: None,
            correct: false,
            failed: true,
        }
        .tap_warn(&problem.id, &e.to_string()),
    }
}

trait TapWarn {
    fn tap_warn(self, problem_id: &str, err: &str) -> Self;
}

impl TapWarn for SampleRecord {
    fn tap_warn(self, problem_id: &str, err: &str) -> Self {
        tracing::warn!(problem_id, sample = self.sample_index, err, "sample failed");
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockRule, MockScript};

    fn problems(n: usize) -> Vec<Problem> {
        (0..n)
            .map(|i| Problem {
                id: format!("e{i}"),
                question: format!("Eval question marker-e{i}: compute."),
                ground_truth: "7".to_string(),
            })
            .collect()
    }

    // 4 problems; mock correct on problems 0 and 1 for all samples, never on
    // 2 and 3. Enumerated outcome: pass@1 = 2/4, pass@3 = 2/4.
    #[test]
    fn fixture_half_correct() {
        let mut rules = Vec::new();
        for i in [0usize, 1] {
            rules.push(MockRule {
                contains: Some(format!("marker-e{i}:")),
                response: Some("\\boxed{7}".into()),
                ..Default::default()
            });
        }
        let backend = MockBackend::new(MockScript {
            rules,
            default_response: "\\boxed{0}".into(),
            default_schedule: None,
        })
        .unwrap();
        let qa = PromptTemplate::from_text("{{question}}");
        let result = evaluate(
            &problems(4),
            &backend,
            &qa,
            &EvalParams { k: 3, ..Default::default() },
            None,
        )
        .unwrap();
        assert_eq!(result.pass_at_1, 0.5);
        assert_eq!(result.pass_at_k, 0.5);
        assert_eq!(result.per_problem.len(), 4);
        assert!(result.per_problem.iter().all(|p| p.samples.len() == 3));
    }

    // Correct only on sample index 2 (seed base + 2): pass@1 = 0, pass@3 = 1.
    #[test]
    fn fixture_only_third_sample_correct() {
        let backend = MockBackend::new(MockScript {
            rules: vec![MockRule {
                seed_is: Some(2),
                response: Some("\\boxed{7}".into()),
                ..Default::default()
            }],
            default_response: "\\boxed{0}".into(),
            default_schedule: None,
        })
        .unwrap();
        let qa = PromptTemplate::from_text("{{question}}");
        let result = evaluate(
            &problems(1),
            &backend,
            &qa,
            &EvalParams { k: 3, ..Default::default() },
            None,
        )
        .unwrap();
        assert_eq!(result.pass_at_1, 0.0);
        assert_eq!(result.pass_at_k, 1.0);
    }

    #[test]
    fn k_equals_one_collapses_the_metrics() {
        let backend = MockBackend::constant("\\boxed{7}");
        let qa = PromptTemplate::from_text("{{question}}");
        let result = evaluate(
            &problems(5),
            &backend,
            &qa,
            &EvalParams { k: 1, ..Default::default() },
            None,
        )
        .unwrap();
        assert_eq!(result.pass_at_1, result.pass_at_k);
        assert_eq!(result.pass_at_1, 1.0);
    }

    #[test]
    fn resume_skips_completed_samples() {
        let backend = MockBackend::constant("\\boxed{7}");
        let qa = PromptTemplate::from_text("{{question}}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let params = EvalParams { k: 2, ..Default::default() };
        let ps = problems(3);
        evaluate(&ps, &backend, &qa, &params, Some(&path)).unwrap();
        let calls = backend.call_count();
        assert_eq!(calls, 6);
        let result = evaluate(&ps, &backend, &qa, &params, Some(&path)).unwrap();
        assert_eq!(backend.call_count(), calls, "rerun must not re-sample");
        assert_eq!(result.pass_at_1, 1.0);
    }
}
