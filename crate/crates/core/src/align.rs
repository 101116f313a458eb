//! Prefix-based alignment: continuation generation, answer filtering, and
//! SFT dataset construction.
//!
//! For each problem the configured truncation strategy picks a prefix, the
//! student continues it to a full solution, the final answer is extracted and
//! checked against ground truth, and only matching examples land in the
//! dataset file. Every attempt — accepted, rejected, or failed — goes to an
//! audit file, because the filter rate is itself a statistic worth keeping.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use num::{BigInt, BigRational, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, GenerationRequest};
use crate::corpus::{
    count_tokens, read_records_tolerant_tail, write_records_atomic, CorpusError, JsonlWriter,
    Problem, Trajectory,
};
use crate::exec;
use crate::judge::{JudgeError, PromptTemplate, SufficiencyJudge};
use crate::truncate::{run_strategy, DecisionFlag, PrefixDecision, StrategyDeps, StrategyKind, TruncateOptions};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Template(#[from] JudgeError),
    #[error("build aborted after {0} problems (fault injection)")]
    Aborted(usize),
}

// ---- answer extraction and matching -----------------------------------------

/// Content of the last brace-balanced `\boxed{...}` in `text`.
fn last_boxed_content(text: &str) -> Option<&str> {
    const MARKER: &str = "\\boxed{";
    let mut search_end = text.len();
    while let Some(start) = text[..search_end].rfind(MARKER) {
        let body_start = start + MARKER.len();
        let mut depth = 1i32;
        for (offset, ch) in text[body_start..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[body_start..body_start + offset]);
                    }
                }
                _ => {}
            }
        }
        // Unbalanced; try an earlier occurrence.
        search_end = start;
    }
    None
}

/// Last standalone number in `text`: digits with optional sign, thousands
/// separators, and decimal part, not glued to a word or a larger number.
fn last_standalone_number(text: &str) -> Option<&str> {
    static NUMBER: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let re = NUMBER.get_or_init(|| {
        regex::Regex::new(r"[-+]?\d[\d,]*(?:\.\d+)?").expect("valid number regex")
    });
    for m in re.find_iter(text).collect::<Vec<_>>().into_iter().rev() {
        let before = text[..m.start()].chars().next_back();
        let after = text[m.end()..].chars().next();
        let glued_before = matches!(before, Some(c) if c.is_alphanumeric() || c == '_' || c == '.');
        let glued_after = matches!(after, Some(c) if c.is_alphanumeric() || c == '_')
            || matches!(after, Some('.') if text[m.end()..].chars().nth(1).is_some_and(|c| c.is_ascii_digit()));
        if !glued_before && !glued_after {
            return Some(m.as_str());
        }
    }
    None
}

/// Normalize an extracted answer: trim, collapse internal whitespace, strip a
/// trailing period and `$` delimiters, drop thousands separators, and reduce
/// simple fractions to lowest terms.
pub fn normalize_answer(raw: &str) -> String {
    let mut s: String = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    s = s.trim_start_matches('$').trim_end_matches('$').trim().to_string();
    if let Some(stripped) = s.strip_suffix('.') {
        s = stripped.to_string();
    }
    // "1,234,567" -> "1234567"
    static GROUPED: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let grouped = GROUPED.get_or_init(|| {
        regex::Regex::new(r"^[-+]?\d{1,3}(?:,\d{3})+(?:\.\d+)?$").expect("valid grouped regex")
    });
    if grouped.is_match(&s) {
        s = s.replace(',', "");
    }
    if let Some(reduced) = reduce_fraction(&s) {
        s = reduced;
    }
    s
}

/// `a/b` with integer parts reduced by gcd; a denominator of one is elided.
fn reduce_fraction(s: &str) -> Option<String> {
    let (num_str, den_str) = s.split_once('/')?;
    let num: BigInt = num_str.trim().parse().ok()?;
    let den: BigInt = den_str.trim().parse().ok()?;
    if den.is_zero() {
        return None;
    }
    let ratio = BigRational::new(num, den);
    if ratio.denom() == &BigInt::from(1) {
        Some(ratio.numer().to_string())
    } else {
        Some(format!("{}/{}", ratio.numer(), ratio.denom()))
    }
}

/// Extract the final answer from model output.
///
/// Primary rule: content of the last `\boxed{...}`; fallback: the last
/// standalone number. The result is normalized; `None` when neither matches.
pub fn extract_answer(text: &str) -> Option<String> {
    let raw = last_boxed_content(text).or_else(|| last_standalone_number(text))?;
    let normalized = normalize_answer(raw);
    if normalized.is_empty() {
        None
    } else {
        Some(normalized)
    }
}

fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num: BigInt = num.trim().parse().ok()?;
        let den: BigInt = den.trim().parse().ok()?;
        if den.is_zero() {
            return None;
        }
        return Some(BigRational::new(num, den));
    }
    if let Some((int_part, frac_part)) = s.split_once('.') {
        if !frac_part.chars().all(|c| c.is_ascii_digit()) || frac_part.is_empty() {
            return None;
        }
        let negative = int_part.starts_with('-');
        let int_digits = int_part.trim_start_matches(['-', '+']);
        if !int_digits.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let digits = format!("{int_digits}{frac_part}");
        let mantissa: BigInt = digits.parse().ok()?;
        let denom = BigInt::from(10u32).pow(frac_part.len() as u32);
        let value = BigRational::new(mantissa, denom);
        return Some(if negative { -value } else { value });
    }
    let int: BigInt = s.parse().ok()?;
    Some(BigRational::from_integer(int))
}

/// True when two normalized answers are equal as strings, or both parse as
/// exact rationals and the rationals are equal.
pub fn answers_match(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    match (parse_rational(a), parse_rational(b)) {
        (Some(ra), Some(rb)) => ra == rb,
        _ => false,
    }
}

// ---- prompts and generation ---------------------------------------------------

/// Render the prefix-continuation prompt: the prefix is presented as prior
/// reasoning context to carry forward to a complete solution.
pub fn render_align_prompt(
    template: &PromptTemplate,
    question: &str,
    prefix_text: &str,
) -> Result<Vec<crate::backend::Message>, JudgeError> {
    if question.trim().is_empty() {
        return Err(JudgeError::EmptyInput("question"));
    }
    if prefix_text.trim().is_empty() {
        return Err(JudgeError::EmptyInput("prefix"));
    }
    template.render_messages(&[("question", question), ("prefix", prefix_text)])
}

/// One continuation at the continuation temperature; only trailing whitespace
/// is trimmed.
pub fn generate_continuation(
    question: &str,
    prefix_text: &str,
    backend: &dyn Backend,
    template: &PromptTemplate,
    temperature: f64,
    max_new_tokens: u32,
    seed: Option<u64>,
) -> Result<String, AlignError> {
    let messages = render_align_prompt(template, question, prefix_text)?;
    let mut request = GenerationRequest::new(messages);
    request.temperature = temperature;
    request.max_new_tokens = max_new_tokens;
    request.seed = seed;
    let result = backend
        .complete(&request)
        .map_err(|e| AlignError::Template(JudgeError::Backend(e)))?;
    Ok(result.text.trim_end().to_string())
}

// ---- records -------------------------------------------------------------------

/// A prefix plus student continuation with its verification outcome; the SFT
/// supervision record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignedExample {
    pub problem_id: String,
    pub question: String,
    pub prefix_text: String,
    pub continuation: String,
    /// `prefix_text` + joiner + `continuation`, byte-exact.
    pub target: String,
    pub extracted_answer: Option<String>,
    pub accepted: bool,
    pub strategy: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Accepted,
    Rejected,
    Failed,
}

/// Audit-file record: an [`AlignedExample`] plus its terminal status and the
/// failure reason, when any.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRecord {
    #[serde(flatten)]
    pub example: AlignedExample,
    pub status: AuditStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Dataset-file record, shaped for instruction-tuning consumers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// The question rendered with the QA template.
    pub instruction: String,
    /// The supervision target: prefix + joiner + continuation.
    pub output: String,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub problem_id: String,
    pub strategy: String,
    pub ratio: f64,
    pub judge_calls: u32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub failed: usize,
    pub mean_ratio: f64,
    pub mean_judge_calls: f64,
    pub mean_target_tokens: f64,
}

/// Where to extract the verified answer from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractFrom {
    /// The continuation alone (the default).
    Continuation,
    /// The concatenated target, for prefixes that may already contain a box.
    Target,
}

pub struct BuildOptions {
    /// Continuations attempted per problem before giving up.
    pub max_attempts: u32,
    pub extract_from: ExtractFrom,
    /// Drop examples whose truncation never found a sufficient prefix.
    pub exclude_insufficient_full: bool,
    /// Joiner between prefix and continuation in the stored target.
    pub joiner: String,
    pub continuation_temperature: f64,
    pub max_new_tokens: u32,
    pub seed: u64,
    pub truncate: TruncateOptions,
    /// Fault-injection hook: stop cleanly after roughly this many problems,
    /// leaving a resumable checkpoint. Test use only.
    pub abort_after_records: Option<usize>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            max_attempts: 1,
            extract_from: ExtractFrom::Continuation,
            exclude_insufficient_full: false,
            joiner: "\n".to_string(),
            continuation_temperature: 0.7,
            max_new_tokens: 4096,
            seed: 0,
            truncate: TruncateOptions::default(),
            abort_after_records: None,
        }
    }
}

/// Output file layout for one build run.
#[derive(Debug, Clone)]
pub struct BuildPaths {
    pub decisions: PathBuf,
    pub audit: PathBuf,
    pub dataset: PathBuf,
    pub summary: PathBuf,
}

impl BuildPaths {
    pub fn in_dir(dir: &Path) -> Self {
        BuildPaths {
            decisions: dir.join("decisions.jsonl"),
            audit: dir.join("audit.jsonl"),
            dataset: dir.join("dataset.jsonl"),
            summary: dir.join("summary.json"),
        }
    }
}

pub struct BuildDeps<'a> {
    pub backend: &'a dyn Backend,
    pub judge: &'a dyn SufficiencyJudge,
    pub qa_template: &'a PromptTemplate,
    pub align_template: &'a PromptTemplate,
}

/// Per-(problem, attempt) generation seed, stable across platforms and runs.
fn attempt_seed(base: u64, problem_id: &str, attempt: u32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(problem_id.as_bytes());
    hasher.update(attempt.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

struct ProblemOutcome {
    decision: Option<PrefixDecision>,
    records: Vec<AuditRecord>,
}

fn failed_record(problem: &Problem, strategy: &StrategyKind, error: String) -> AuditRecord {
    AuditRecord {
        example: AlignedExample {
            problem_id: problem.id.clone(),
            question: problem.question.clone(),
            prefix_text: String::new(),
            continuation: String::new(),
            target: String::new(),
            extracted_answer: None,
            accepted: false,
            strategy: strategy.id(),
            attempt: 1,
        },
        status: AuditStatus::Failed,
        error: Some(error),
    }
}

fn process_problem(
    problem: &Problem,
    trajectory: Option<&Trajectory>,
    prior_decision: Option<PrefixDecision>,
    start_attempt: u32,
    strategy: &StrategyKind,
    deps: &BuildDeps<'_>,
    options: &BuildOptions,
) -> ProblemOutcome {
    let Some(trajectory) = trajectory else {
        return ProblemOutcome {
            decision: None,
            records: vec![failed_record(problem, strategy, "no trajectory for problem".into())],
        };
    };

    let decision = match prior_decision {
        Some(d) => d,
        None => {
            let strategy_deps = StrategyDeps {
                judge: Some(deps.judge),
                backend: Some(deps.backend),
                qa_template: Some(deps.qa_template),
            };
            match run_strategy(trajectory, &problem.question, strategy, &strategy_deps, &options.truncate)
            {
                Ok(d) => d,
                Err(e) => {
                    return ProblemOutcome {
                        decision: None,
                        records: vec![failed_record(problem, strategy, e.to_string())],
                    };
                }
            }
        }
    };

    if options.exclude_insufficient_full
        && decision.flags.contains(&DecisionFlag::InsufficientFull)
    {
        let record = AuditRecord {
            example: AlignedExample {
                problem_id: problem.id.clone(),
                question: problem.question.clone(),
                prefix_text: decision.prefix_text.clone(),
                continuation: String::new(),
                target: String::new(),
                extracted_answer: None,
                accepted: false,
                strategy: decision.strategy.clone(),
                attempt: 1,
            },
            status: AuditStatus::Rejected,
            error: Some("no sufficient prefix found; excluded by configuration".into()),
        };
        return ProblemOutcome {
            decision: Some(decision),
            records: vec![record],
        };
    }

    let mut records = Vec::new();
    for attempt in start_attempt..=options.max_attempts.max(1) {
        let seed = attempt_seed(options.seed, &problem.id, attempt);
        let continuation = match generate_continuation(
            &problem.question,
            &decision.prefix_text,
            deps.backend,
            deps.align_template,
            options.continuation_temperature,
            options.max_new_tokens,
            Some(seed),
        ) {
            Ok(text) => text,
            Err(e) => {
                let mut rec = failed_record(problem, strategy, e.to_string());
                rec.example.prefix_text = decision.prefix_text.clone();
                rec.example.attempt = attempt;
                records.push(rec);
                return ProblemOutcome {
                    decision: Some(decision),
                    records,
                };
            }
        };
        let target = format!("{}{}{}", decision.prefix_text, options.joiner, continuation);
        let extracted_answer = match options.extract_from {
            ExtractFrom::Continuation => extract_answer(&continuation),
            ExtractFrom::Target => extract_answer(&target),
        };
        let accepted = extracted_answer
            .as_deref()
            .is_some_and(|ans| answers_match(ans, &normalize_answer(&problem.ground_truth)));
        records.push(AuditRecord {
            example: AlignedExample {
                problem_id: problem.id.clone(),
                question: problem.question.clone(),
                prefix_text: decision.prefix_text.clone(),
                continuation,
                target,
                extracted_answer,
                accepted,
                strategy: decision.strategy.clone(),
                attempt,
            },
            status: if accepted {
                AuditStatus::Accepted
            } else {
                AuditStatus::Rejected
            },
            error: None,
        });
        if accepted {
            break;
        }
    }
    ProblemOutcome {
        decision: Some(decision),
        records,
    }
}

/// Whether a problem's recorded attempts already reached a terminal state.
fn is_terminal(records: &[&AuditRecord], max_attempts: u32) -> bool {
    records.iter().any(|r| {
        matches!(r.status, AuditStatus::Accepted | AuditStatus::Failed)
            || (r.status == AuditStatus::Rejected && r.error.is_some())
    }) || records.len() as u32 >= max_attempts.max(1)
}

/// Build the aligned dataset end to end.
///
/// Fully resumable: decisions and audit records are appended as problems
/// complete, problems with a terminal record are skipped on rerun, and
/// finalization rewrites every output sorted by problem id so that an
/// interrupted-then-resumed run is byte-identical to an uninterrupted one.
/// Per-problem failures are recorded, never fatal; only I/O errors abort.
pub fn build_dataset(
    problems: &[Problem],
    trajectories: &[Trajectory],
    strategy: &StrategyKind,
    deps: &BuildDeps<'_>,
    options: &BuildOptions,
    paths: &BuildPaths,
) -> Result<DatasetSummary, AlignError> {
    let trajectory_by_id: HashMap<&str, &Trajectory> = trajectories
        .iter()
        .map(|t| (t.problem_id.as_str(), t))
        .collect();

    // Checkpoints from a previous (possibly interrupted) run.
    let (prior_decisions, _) = read_records_tolerant_tail::<PrefixDecision>(&paths.decisions)?;
    let (prior_audit, _) = read_records_tolerant_tail::<AuditRecord>(&paths.audit)?;
    let mut decisions_by_id: HashMap<String, PrefixDecision> = prior_decisions
        .into_iter()
        .map(|d| (d.problem_id.clone(), d))
        .collect();
    let mut audit_by_id: HashMap<String, Vec<AuditRecord>> = HashMap::new();
    for rec in prior_audit {
        audit_by_id
            .entry(rec.example.problem_id.clone())
            .or_default()
            .push(rec);
    }

    let pending: Vec<&Problem> = problems
        .iter()
        .filter(|p| {
            let recorded: Vec<&AuditRecord> = audit_by_id
                .get(&p.id)
                .map(|v| v.iter().collect())
                .unwrap_or_default();
            !is_terminal(&recorded, options.max_attempts)
        })
        .collect();
    if !pending.is_empty() && pending.len() < problems.len() {
        tracing::info!(
            done = problems.len() - pending.len(),
            pending = pending.len(),
            "resuming dataset build"
        );
    }

    let decisions_writer = Mutex::new(JsonlWriter::append(&paths.decisions)?);
    let audit_writer = Mutex::new(JsonlWriter::append(&paths.audit)?);
    let processed = std::sync::atomic::AtomicUsize::new(0);
    let abort_at = options.abort_after_records;
    let io_error: Mutex<Option<CorpusError>> = Mutex::new(None);

    let work: Vec<(usize, &Problem)> = pending.into_iter().enumerate().collect();
    let outcomes: Vec<Option<(String, ProblemOutcome)>> = exec::par_map(work, |(_, problem)| {
        if let Some(limit) = abort_at {
            if processed.load(std::sync::atomic::Ordering::SeqCst) >= limit {
                return None; // simulated interruption: stop picking up work
            }
        }
        let prior = decisions_by_id.get(&problem.id).cloned();
        let trajectory = trajectory_by_id.get(problem.id.as_str()).copied();
        // Non-terminal recorded attempts stand (their seeds are stable);
        // resume continues from the next attempt number.
        let start_attempt = audit_by_id
            .get(&problem.id)
            .map(|recs| recs.len() as u32 + 1)
            .unwrap_or(1);
        let outcome =
            process_problem(problem, trajectory, prior, start_attempt, strategy, deps, options);

        {
            let mut guard = io_error.lock().unwrap();
            if guard.is_none() {
                let result = (|| -> Result<(), CorpusError> {
                    if let Some(d) = &outcome.decision {
                        if !decisions_by_id.contains_key(&problem.id) {
                            decisions_writer.lock().unwrap().write(d)?;
                        }
                    }
                    let mut audit = audit_writer.lock().unwrap();
                    for rec in &outcome.records {
                        audit.write(rec)?;
                    }
                    Ok(())
                })();
                if let Err(e) = result {
                    *guard = Some(e);
                }
            }
        }
        processed.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Some((problem.id.clone(), outcome))
    });

    if let Some(err) = io_error.into_inner().unwrap() {
        return Err(AlignError::Corpus(err));
    }
    let aborted = outcomes.iter().any(|o| o.is_none());
    for outcome in outcomes.into_iter().flatten() {
        let (id, ProblemOutcome { decision, records }) = outcome;
        if let Some(d) = decision {
            decisions_by_id.entry(id.clone()).or_insert(d);
        }
        audit_by_id.entry(id).or_default().extend(records);
    }
    if aborted {
        return Err(AlignError::Aborted(
            processed.load(std::sync::atomic::Ordering::SeqCst),
        ));
    }

    finalize(problems, &decisions_by_id, &audit_by_id, deps, paths)
}

/// Rewrite outputs sorted by problem id and derive the dataset + summary.
fn finalize(
    problems: &[Problem],
    decisions_by_id: &HashMap<String, PrefixDecision>,
    audit_by_id: &HashMap<String, Vec<AuditRecord>>,
    deps: &BuildDeps<'_>,
    paths: &BuildPaths,
) -> Result<DatasetSummary, AlignError> {
    let sorted_decisions: BTreeMap<&String, &PrefixDecision> =
        decisions_by_id.iter().map(|(k, v)| (k, v)).collect();
    write_records_atomic(
        &paths.decisions,
        &sorted_decisions.values().collect::<Vec<_>>(),
    )?;

    let mut sorted_audit: Vec<&AuditRecord> = audit_by_id.values().flatten().collect();
    sorted_audit.sort_by(|a, b| {
        (&a.example.problem_id, a.example.attempt).cmp(&(&b.example.problem_id, b.example.attempt))
    });
    write_records_atomic(&paths.audit, &sorted_audit)?;

    let mut dataset = Vec::new();
    for rec in &sorted_audit {
        if rec.status != AuditStatus::Accepted {
            continue;
        }
        let decision = decisions_by_id
            .get(&rec.example.problem_id)
            .expect("accepted record always has a decision");
        let instruction = deps
            .qa_template
            .render_text(&[("question", rec.example.question.as_str())])?;
        dataset.push(DatasetRecord {
            instruction,
            output: rec.example.target.clone(),
            meta: DatasetMeta {
                problem_id: rec.example.problem_id.clone(),
                strategy: rec.example.strategy.clone(),
                ratio: decision.ratio,
                judge_calls: decision.judge_calls,
            },
        });
    }
    write_records_atomic(&paths.dataset, &dataset)?;

    let mut per_problem_status: BTreeMap<&str, AuditStatus> = BTreeMap::new();
    for rec in &sorted_audit {
        let slot = per_problem_status
            .entry(rec.example.problem_id.as_str())
            .or_insert(rec.status);
        if rec.status == AuditStatus::Accepted || *slot == AuditStatus::Rejected {
            *slot = rec.status;
        }
    }
    let accepted = per_problem_status
        .values()
        .filter(|s| **s == AuditStatus::Accepted)
        .count();
    let failed = per_problem_status
        .values()
        .filter(|s| **s == AuditStatus::Failed)
        .count();
    let rejected = per_problem_status.len() - accepted - failed;

    let mean = |values: Vec<f64>| -> f64 {
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let summary = DatasetSummary {
        total: problems.len(),
        accepted,
        rejected,
        failed,
        mean_ratio: mean(decisions_by_id.values().map(|d| d.ratio).collect()),
        mean_judge_calls: mean(
            decisions_by_id
                .values()
                .map(|d| d.judge_calls as f64)
                .collect(),
        ),
        mean_target_tokens: mean(
            dataset
                .iter()
                .map(|r| count_tokens(&r.output) as f64)
                .collect(),
        ),
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&paths.summary, summary_json.as_bytes()).map_err(|e| {
        AlignError::Corpus(CorpusError::Io {
            path: paths.summary.display().to_string(),
            source: e,
        })
    })?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockRule, MockScript};
    use crate::judge::ThresholdOracle;

    #[test]
    fn boxed_extraction_cases() {
        assert_eq!(
            extract_answer("Therefore, the remainder is \\boxed{109}."),
            Some("109".into())
        );
        assert_eq!(extract_answer("the new volume is \\boxed{30}"), Some("30".into()));
        // Fallback: last standalone number.
        assert_eq!(extract_answer("thus the remainder is 999"), Some("999".into()));
    }

    #[test]
    fn boxed_is_brace_balanced() {
        assert_eq!(
            extract_answer("\\boxed{\\frac{1}{2}}"),
            Some("\\frac{1}{2}".into())
        );
        // Last balanced box wins.
        assert_eq!(
            extract_answer("\\boxed{7} then \\boxed{9}"),
            Some("9".into())
        );
        // Unbalanced final box falls back to an earlier one.
        assert_eq!(extract_answer("\\boxed{4} and \\boxed{oops"), Some("4".into()));
    }

    #[test]
    fn fallback_number_is_standalone() {
        assert_eq!(extract_answer("we get x2 as a name"), None);
        assert_eq!(extract_answer("total 1,234,567."), Some("1234567".into()));
        assert_eq!(extract_answer("value -3.5 found"), Some("-3.5".into()));
        assert_eq!(extract_answer("no numbers at all"), None);
        assert_eq!(extract_answer(""), None);
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("  109. "), "109");
        assert_eq!(normalize_answer("$42$"), "42");
        assert_eq!(normalize_answer("2/4"), "1/2");
        assert_eq!(normalize_answer("4/2"), "2");
        assert_eq!(normalize_answer("a   b\tc"), "a b c");
        assert_eq!(normalize_answer("1,234"), "1234");
    }

    #[test]
    fn answers_match_rational_equality() {
        assert!(answers_match("109", "109"));
        assert!(answers_match("0.5", "1/2"));
        assert!(!answers_match("29.4", "30"));
        assert!(answers_match("-0.25", "-1/4"));
        assert!(!answers_match("abc", "abd"));
        assert!(answers_match("abc", "abc"));
    }

    fn fixture(n: usize) -> (Vec<Problem>, Vec<Trajectory>) {
        let problems: Vec<Problem> = (0..n)
            .map(|i| Problem {
                id: format!("p{i:03}"),
                question: format!("Question q{i:03}: what is {i} plus {i}?"),
                ground_truth: format!("{}", 2 * i),
            })
            .collect();
        let trajectories = problems
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let text: String = (1..=6)
                    .map(|s| format!("Reasoning sentence {s} for item {i}."))
                    .collect::<Vec<_>>()
                    .join(" ");
                Trajectory::from_raw(p.id.clone(), &text).unwrap()
            })
            .collect();
        (problems, trajectories)
    }

    /// Mock that answers correctly for even-indexed problems only.
    fn even_correct_backend(n: usize) -> MockBackend {
        let mut rules: Vec<MockRule> = Vec::new();
        for i in (0..n).step_by(2) {
            rules.push(MockRule {
                contains: Some(format!("q{i:03}")),
                response: Some(format!("Continuing. The answer is \\boxed{{{}}}.", 2 * i)),
                ..Default::default()
            });
        }
        rules.push(MockRule {
            contains: Some("Reasoning sentence".into()),
            response: Some("ENOUGH".into()),
            ..Default::default()
        });
        MockBackend::new(MockScript {
            rules,
            default_response: "The answer is \\boxed{-1}.".into(),
            default_schedule: None,
        })
        .unwrap()
    }

    fn test_deps<'a>(
        backend: &'a MockBackend,
        judge: &'a ThresholdOracle,
        qa: &'a PromptTemplate,
        align: &'a PromptTemplate,
    ) -> BuildDeps<'a> {
        BuildDeps {
            backend,
            judge,
            qa_template: qa,
            align_template: align,
        }
    }

    #[test]
    fn build_accepts_even_rejects_odd() {
        let (problems, trajectories) = fixture(20);
        let backend = even_correct_backend(20);
        let judge = ThresholdOracle::new(3);
        let qa = PromptTemplate::from_text("Solve: {{question}}");
        let align = PromptTemplate::from_text("{{question}}\n{{prefix}}\ncontinue");
        let dir = tempfile::tempdir().unwrap();
        let paths = BuildPaths::in_dir(dir.path());

        let summary = build_dataset(
            &problems,
            &trajectories,
            &StrategyKind::Binary,
            &test_deps(&backend, &judge, &qa, &align),
            &BuildOptions::default(),
            &paths,
        )
        .unwrap();
        assert_eq!(summary.total, 20);
        assert_eq!(summary.accepted, 10);
        assert_eq!(summary.rejected, 10);
        assert_eq!(summary.failed, 0);

        let dataset: Vec<DatasetRecord> = crate::corpus::read_records(&paths.dataset).unwrap();
        assert_eq!(dataset.len(), 10);
        for rec in &dataset {
            // Filter soundness, re-checked offline from files alone.
            let pid = &rec.meta.problem_id;
            let problem = problems.iter().find(|p| &p.id == pid).unwrap();
            let continuation = rec.output.split('\n').next_back().unwrap();
            let ans = extract_answer(continuation).unwrap();
            assert!(answers_match(&ans, &normalize_answer(&problem.ground_truth)));
        }
    }

    #[test]
    fn rerun_makes_no_backend_calls_and_identical_bytes() {
        let (problems, trajectories) = fixture(8);
        let backend = even_correct_backend(8);
        let judge = ThresholdOracle::new(2);
        let qa = PromptTemplate::from_text("Solve: {{question}}");
        let align = PromptTemplate::from_text("{{question}}\n{{prefix}}");
        let dir = tempfile::tempdir().unwrap();
        let paths = BuildPaths::in_dir(dir.path());
        let deps = test_deps(&backend, &judge, &qa, &align);

        build_dataset(&problems, &trajectories, &StrategyKind::Binary, &deps, &BuildOptions::default(), &paths).unwrap();
        let first_bytes = std::fs::read(&paths.dataset).unwrap();
        let calls_after_first = backend.call_count();

        build_dataset(&problems, &trajectories, &StrategyKind::Binary, &deps, &BuildOptions::default(), &paths).unwrap();
        assert_eq!(backend.call_count(), calls_after_first, "resume must not re-call the backend");
        assert_eq!(std::fs::read(&paths.dataset).unwrap(), first_bytes);
    }

    #[test]
    fn target_structure_holds() {
        let (problems, trajectories) = fixture(4);
        let backend = even_correct_backend(4);
        let judge = ThresholdOracle::new(1);
        let qa = PromptTemplate::from_text("{{question}}");
        let align = PromptTemplate::from_text("{{question}} {{prefix}}");
        let dir = tempfile::tempdir().unwrap();
        let paths = BuildPaths::in_dir(dir.path());
        build_dataset(
            &problems,
            &trajectories,
            &StrategyKind::Full,
            &test_deps(&backend, &judge, &qa, &align),
            &BuildOptions::default(),
            &paths,
        )
        .unwrap();
        let audit: Vec<AuditRecord> = crate::corpus::read_records(&paths.audit).unwrap();
        assert_eq!(audit.len(), 4);
        for rec in audit {
            let e = rec.example;
            assert_eq!(e.target, format!("{}\n{}", e.prefix_text, e.continuation));
            assert!(e.target.starts_with(&e.prefix_text));
        }
    }

    #[test]
    fn missing_trajectory_is_a_failure_record() {
        let (problems, mut trajectories) = fixture(3);
        trajectories.remove(1);
        let backend = even_correct_backend(3);
        let judge = ThresholdOracle::new(1);
        let qa = PromptTemplate::from_text("{{question}}");
        let align = PromptTemplate::from_text("{{question}} {{prefix}}");
        let dir = tempfile::tempdir().unwrap();
        let paths = BuildPaths::in_dir(dir.path());
        let summary = build_dataset(
            &problems,
            &trajectories,
            &StrategyKind::Binary,
            &test_deps(&backend, &judge, &qa, &align),
            &BuildOptions::default(),
            &paths,
        )
        .unwrap();
        assert_eq!(summary.failed, 1);
        assert_eq!(summary.total, 3);
        assert_eq!(summary.accepted + summary.rejected + summary.failed, 3);
    }

    #[test]
    fn max_attempts_records_every_attempt() {
        let (problems, trajectories) = fixture(2);
        let backend = MockBackend::constant("no box here, answer unknown");
        let judge = ThresholdOracle::new(1);
        let qa = PromptTemplate::from_text("{{question}}");
        let align = PromptTemplate::from_text("{{question}} {{prefix}}");
        let dir = tempfile::tempdir().unwrap();
        let paths = BuildPaths::in_dir(dir.path());
        let options = BuildOptions {
            max_attempts: 3,
            ..Default::default()
        };
        let deps = test_deps(&backend, &judge, &qa, &align);
        let summary =
            build_dataset(&problems, &trajectories, &StrategyKind::Full, &deps, &options, &paths)
                .unwrap();
        assert_eq!(summary.rejected, 2);
        let audit: Vec<AuditRecord> = crate::corpus::read_records(&paths.audit).unwrap();
        assert_eq!(audit.len(), 6, "three attempts per problem");
        assert_eq!(audit.iter().map(|r| r.example.attempt).max(), Some(3));

        // All attempts exhausted: the problems are terminal on rerun.
        let calls = backend.call_count();
        build_dataset(&problems, &trajectories, &StrategyKind::Full, &deps, &options, &paths)
            .unwrap();
        assert_eq!(backend.call_count(), calls);
    }

    #[test]
    fn attempt_seed_is_stable() {
        assert_eq!(attempt_seed(7, "p1", 1), attempt_seed(7, "p1", 1));
        assert_ne!(attempt_seed(7, "p1", 1), attempt_seed(7, "p1", 2));
        assert_ne!(attempt_seed(7, "p1", 1), attempt_seed(8, "p1", 1));
    }
}
