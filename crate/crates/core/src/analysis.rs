//! Trajectory and run analytics.
//!
//! Everything here reads persisted records or calls the backend in scoring
//! mode; nothing touches live pipeline state, so every report is reproducible
//! from artifacts alone. Reports are emitted as JSON documents plus flat CSV
//! for external plotting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationRequest, TokenLogprob};
use crate::corpus::{count_tokens, CorpusError, Trajectory};
use crate::judge::{JudgeError, PromptTemplate};
use crate::truncate::PrefixDecision;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}: no records")]
    EmptyCorpus(String),
    #[error("{file}: records carry none of the known text fields")]
    NoTextField { file: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] JudgeError),
}

/// How per-token entropy was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyEstimator {
    /// Distribution entropy over the returned top-k alternatives, with
    /// probabilities renormalized to sum to one.
    FullTopk,
    /// Surprisal of the realized token, `-logprob`.
    SurprisalProxy,
}

/// Per-token entropy estimates for a scored sequence.
///
/// The full top-k estimator is used when every token carries alternatives;
/// otherwise all tokens fall back to surprisal so a report never mixes
/// estimators.
pub fn entropy_per_token(entries: &[TokenLogprob]) -> (Vec<f64>, EntropyEstimator) {
    let full_topk = !entries.is_empty() && entries.iter().all(|e| !e.top_alternatives.is_empty());
    let values = entries
        .iter()
        .map(|e| {
            if full_topk {
                let weights: Vec<f64> = e.top_alternatives.iter().map(|a| a.logprob.exp()).collect();
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    return 0.0;
                }
                -weights
                    .iter()
                    .map(|w| {
                        let p = w / total;
                        if p > 0.0 {
                            p * p.ln()
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            } else {
                (-e.logprob).max(0.0)
            }
        })
        .collect();
    let estimator = if full_topk {
        EntropyEstimator::FullTopk
    } else {
        EntropyEstimator::SurprisalProxy
    };
    (values, estimator)
}

/// Byte spans of scored tokens located by a forward scan over `text`.
///
/// Backend tokens appear in order, so each one is searched for at or after
/// the previous match; a token that cannot be found gets a zero-length span
/// at the cursor and does not advance it.
pub fn align_token_spans(text: &str, entries: &[TokenLogprob]) -> Vec<(usize, usize)> {
    let mut spans = Vec::with_capacity(entries.len());
    let mut cursor = 0usize;
    for entry in entries {
        if entry.token.is_empty() {
            spans.push((cursor, cursor));
            continue;
        }
        match text[cursor..].find(&entry.token) {
            Some(offset) => {
                let start = cursor + offset;
                let end = start + entry.token.len();
                spans.push((start, end));
                cursor = end;
            }
            None => spans.push((cursor, cursor)),
        }
    }
    spans
}

/// Total entropy mass per sentence: each scored token's entropy is attributed
/// to the sentence containing the token's start offset.
pub fn sentence_entropy_mass(
    trajectory: &Trajectory,
    entries: &[TokenLogprob],
    entropies: &[f64],
) -> Vec<f64> {
    let spans = align_token_spans(&trajectory.text, entries);
    let mut masses = vec![0.0; trajectory.sentence_count()];
    let mut sentence_idx = 0usize;
    for (k, &(start, _)) in spans.iter().enumerate() {
        while sentence_idx + 1 < trajectory.sentences.len()
            && start >= trajectory.sentences[sentence_idx].end
        {
            sentence_idx += 1;
        }
        masses[sentence_idx] += entropies[k];
    }
    masses
}

/// Balanced chunk sizes: `n` tokens into `n_chunks` groups whose sizes differ
/// by at most one, larger groups first.
pub fn chunk_sizes(n: usize, n_chunks: usize) -> Vec<usize> {
    assert!(n_chunks >= 1);
    let base = n / n_chunks;
    let rem = n % n_chunks;
    (0..n_chunks).map(|i| base + usize::from(i < rem)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkEntropyReport {
    pub problem_id: String,
    pub n_chunks: usize,
    pub chunk_means: Vec<f64>,
    pub estimator: EntropyEstimator,
}

/// Positional uncertainty profile: score the trajectory conditioned on the QA
/// prompt, split the token sequence into `n_chunks` balanced chunks, and
/// report the mean per-token entropy of each chunk.
pub fn chunk_entropy(
    trajectory: &Trajectory,
    question: &str,
    backend: &dyn Backend,
    qa_template: &PromptTemplate,
    n_chunks: usize,
) -> Result<ChunkEntropyReport, AnalysisError> {
    let context = qa_template.render_text(&[("question", question)])?;
    let entries = backend.score_tokens(&context, &trajectory.text)?;
    let (entropies, estimator) = entropy_per_token(&entries);

    let sizes = chunk_sizes(entropies.len(), n_chunks);
    let mut chunk_means = Vec::with_capacity(n_chunks);
    let mut offset = 0usize;
    for size in sizes {
        let mean = if size == 0 {
            0.0
        } else {
            entropies[offset..offset + size].iter().sum::<f64>() / size as f64
        };
        chunk_means.push(mean);
        offset += size;
    }
    Ok(ChunkEntropyReport {
        problem_id: trajectory.problem_id.clone(),
        n_chunks,
        chunk_means,
        estimator,
    })
}

// ---- offline file analytics -------------------------------------------------

/// Fields tried, in order, when no explicit field is configured.
const TEXT_FIELD_CANDIDATES: &[&str] = &[
    "text",
    "output",
    "target",
    "prefix_text",
    "continuation",
    "question",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthStats {
    pub file: String,
    pub field: String,
    pub records: usize,
    pub mean_tokens: f64,
}

/// Mean token length of a text field across each JSONL file.
pub fn length_stats(
    paths: &[std::path::PathBuf],
    field: Option<&str>,
) -> Result<Vec<LengthStats>, AnalysisError> {
    let mut out = Vec::new();
    for path in paths {
        let records: Vec<serde_json::Value> = crate::corpus::read_records(path)?;
        if records.is_empty() {
            return Err(AnalysisError::EmptyCorpus(path.display().to_string()));
        }
        let field_name = match field {
            Some(f) => f.to_string(),
            None => TEXT_FIELD_CANDIDATES
                .iter()
                .find(|f| records[0].get(**f).and_then(|v| v.as_str()).is_some())
                .map(|f| f.to_string())
                .ok_or_else(|| AnalysisError::NoTextField {
                    file: path.display().to_string(),
                })?,
        };
        let mut total = 0usize;
        for rec in &records {
            let text = rec.get(&field_name).and_then(|v| v.as_str()).unwrap_or("");
            total += count_tokens(text);
        }
        out.push(LengthStats {
            file: path.display().to_string(),
            field: field_name,
            records: records.len(),
            mean_tokens: total as f64 / records.len() as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchCountStats {
    pub strategy: String,
    pub decisions: usize,
    pub mean_judge_calls: f64,
    pub mean_ratio: f64,
}

/// Mean judge calls (and ratio) per strategy over decision files.
pub fn search_count_stats(
    paths: &[std::path::PathBuf],
) -> Result<Vec<SearchCountStats>, AnalysisError> {
    let mut grouped: BTreeMap<String, (usize, u64, f64)> = BTreeMap::new();
    let mut any = false;
    for path in paths {
        let decisions: Vec<PrefixDecision> = crate::corpus::read_records(path)?;
        for d in decisions {
            any = true;
            let slot = grouped.entry(d.strategy.clone()).or_insert((0, 0, 0.0));
            slot.0 += 1;
            slot.1 += d.judge_calls as u64;
            slot.2 += d.ratio;
        }
    }
    if !any {
        return Err(AnalysisError::EmptyCorpus(
            paths
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    Ok(grouped
        .into_iter()
        .map(|(strategy, (n, calls, ratio))| SearchCountStats {
            strategy,
            decisions: n,
            mean_judge_calls: calls as f64 / n as f64,
            mean_ratio: ratio / n as f64,
        })
        .collect())
}

// ---- pairwise quality judging ------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub problem_id: String,
    pub winner: Preference,
    /// Whether candidates were swapped when shown to the judge; the winner is
    /// already mapped back to the caller's A/B.
    pub swapped: bool,
    pub defaulted: bool,
    pub raw_text: String,
}

/// Parse a preference token out of judge output: "TIE" anywhere wins, else the
/// first standalone `A` or `B`; anything else defaults to a tie.
fn parse_preference(raw: &str) -> (Preference, bool) {
    let upper = raw.to_uppercase();
    if upper.contains("TIE") {
        return (Preference::Tie, false);
    }
    let bytes = upper.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'A' && b != b'B' {
            continue;
        }
        let prev_ok = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        let next_ok = i + 1 >= bytes.len() || !bytes[i + 1].is_ascii_alphanumeric();
        if prev_ok && next_ok {
            return (
                if b == b'A' { Preference::A } else { Preference::B },
                false,
            );
        }
    }
    (Preference::Tie, true)
}

/// Judge which of two candidate answers is better.
///
/// `swap_order` controls presentation: when true, candidate B is shown in the
/// A slot (position-bias control); the returned winner is mapped back and the
/// order recorded.
pub fn pairwise_quality_judge(
    problem_id: &str,
    question: &str,
    answer_a: &str,
    answer_b: &str,
    backend: &dyn Backend,
    template: &PromptTemplate,
    temperature: f64,
    swap_order: bool,
) -> Result<ComparisonRecord, AnalysisError> {
    let (first, second) = if swap_order {
        (answer_b, answer_a)
    } else {
        (answer_a, answer_b)
    };
    let messages = template.render_messages(&[
        ("question", question),
        ("response_a", first),
        ("response_b", second),
    ])?;
    let mut request = GenerationRequest::new(messages);
    request.temperature = temperature;
    request.max_new_tokens = 64;
    let result = backend.complete(&request)?;
    let (raw_pref, defaulted) = parse_preference(&result.text);
    let winner = match (raw_pref, swap_order) {
        (Preference::A, true) => Preference::B,
        (Preference::B, true) => Preference::A,
        (p, _) => p,
    };
    Ok(ComparisonRecord {
        problem_id: problem_id.to_string(),
        winner,
        swapped: swap_order,
        defaulted,
        raw_text: result.text,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualitySummary {
    pub comparisons: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub defaulted: usize,
    pub win_rate_a: f64,
    pub win_rate_b: f64,
}

pub fn summarize_quality(records: &[ComparisonRecord]) -> QualitySummary {
    let wins_a = records.iter().filter(|r| r.winner == Preference::A).count();
    let wins_b = records.iter().filter(|r| r.winner == Preference::B).count();
    let ties = records.iter().filter(|r| r.winner == Preference::Tie).count();
    let n = records.len().max(1);
    QualitySummary {
        comparisons: records.len(),
        wins_a,
        wins_b,
        ties,
        defaulted: records.iter().filter(|r| r.defaulted).count(),
        win_rate_a: wins_a as f64 / n as f64,
        win_rate_b: wins_b as f64 / n as f64,
    }
}

// ---- CSV emitters -------------------------------------------------------------

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// One row per chunk: `problem_id,chunk,mean_entropy,estimator`.
pub fn entropy_csv(reports: &[ChunkEntropyReport]) -> String {
    let mut out = String::from("problem_id,chunk,mean_entropy,estimator\n");
    for r in reports {
        let estimator = match r.estimator {
            EntropyEstimator::FullTopk => "full_topk",
            EntropyEstimator::SurprisalProxy => "surprisal_proxy",
        };
        for (i, mean) in r.chunk_means.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_escape(&r.problem_id),
                i + 1,
                mean,
                estimator
            ));
        }
    }
    out
}

/// One row per strategy: `strategy,decisions,mean_judge_calls,mean_ratio`.
pub fn search_counts_csv(stats: &[SearchCountStats]) -> String {
    let mut out = String::from("strategy,decisions,mean_judge_calls,mean_ratio\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_escape(&s.strategy),
            s.decisions,
            s.mean_judge_calls,
            s.mean_ratio
        ));
    }
    out
}

/// One row per file: `file,field,records,mean_tokens`.
pub fn lengths_csv(stats: &[LengthStats]) -> String {
    let mut out = String::from("file,field,records,mean_tokens\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_escape(&s.file),
            s.field,
            s.records,
            s.mean_tokens
        ));
    }
    out
}

/// One row per comparison: `problem_id,winner,swapped,defaulted`.
pub fn quality_csv(records: &[ComparisonRecord]) -> String {
    let mut out = String::from("problem_id,winner,swapped,defaulted\n");
    for r in records {
        let winner = match r.winner {
            Preference::A => "A",
            Preference::B => "B",
            Preference::Tie => "tie",
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_escape(&r.problem_id),
            winner,
            r.swapped,
            r.defaulted
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript, Schedule, TokenAlternative};
    use crate::corpus::JsonlWriter;

    fn scoring_mock(schedule: Schedule) -> MockBackend {
        MockBackend::new(MockScript {
            rules: Vec::new(),
            default_response: "ok".into(),
            default_schedule: Some(schedule),
        })
        .unwrap()
    }

    fn trajectory_with_tokens(n: usize) -> Trajectory {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Trajectory::from_raw("t", &words.join(" ")).unwrap()
    }

    #[test]
    fn constant_schedule_gives_flat_chunk_means() {
        let t = trajectory_with_tokens(100);
        assert_eq!(t.token_count, 100);
        let backend = scoring_mock(Schedule::Constant { value: -1.0 });
        let qa = PromptTemplate::from_text("{{question}}");
        let report = chunk_entropy(&t, "q", &backend, &qa, 10).unwrap();
        assert_eq!(report.estimator, EntropyEstimator::SurprisalProxy);
        assert_eq!(report.chunk_means.len(), 10);
        for mean in &report.chunk_means {
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    // Linear surprisal 0.01*k over 100 tokens: chunk c (0-based) covers
    // tokens 10c..10c+9, mean = 0.01 * (10c + 4.5).
    #[test]
    fn linear_schedule_chunk_means_hand_computed() {
        let t = trajectory_with_tokens(100);
        let backend = scoring_mock(Schedule::Linear { coefficient: -0.01 });
        let qa = PromptTemplate::from_text("{{question}}");
        let report = chunk_entropy(&t, "q", &backend, &qa, 10).unwrap();
        for (c, mean) in report.chunk_means.iter().enumerate() {
            let expect = 0.01 * (10.0 * c as f64 + 4.5);
            assert!((mean - expect).abs() < 1e-9, "chunk {c}: {mean} vs {expect}");
        }
        for pair in report.chunk_means.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn chunk_sizes_differ_by_at_most_one() {
        // 95 tokens in 10 chunks: five of 10 and five of 9.
        assert_eq!(chunk_sizes(95, 10), vec![10, 10, 10, 10, 10, 9, 9, 9, 9, 9]);
        for n in 1..=1000 {
            let sizes = chunk_sizes(n, 10);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            let max = *sizes.iter().max().unwrap();
            let min = *sizes.iter().min().unwrap();
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn full_topk_estimator_renormalizes() {
        // Two equally likely alternatives: entropy ln 2 regardless of scale.
        let entry = TokenLogprob {
            token: "x".into(),
            logprob: -0.7,
            top_alternatives: vec![
                TokenAlternative { token: "x".into(), logprob: -3.0 },
                TokenAlternative { token: "y".into(), logprob: -3.0 },
            ],
        };
        let (values, estimator) = entropy_per_token(&[entry]);
        assert_eq!(estimator, EntropyEstimator::FullTopk);
        assert!((values[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn surprisal_fallback_when_alternatives_missing() {
        let entry = TokenLogprob {
            token: "x".into(),
            logprob: -2.5,
            top_alternatives: Vec::new(),
        };
        let (values, estimator) = entropy_per_token(&[entry]);
        assert_eq!(estimator, EntropyEstimator::SurprisalProxy);
        assert!((values[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn token_alignment_walks_forward() {
        let text = "3.14 is pi";
        let entries: Vec<TokenLogprob> = ["3", ".", "14", "is", "pi"]
            .iter()
            .map(|t| TokenLogprob {
                token: t.to_string(),
                logprob: -1.0,
                top_alternatives: Vec::new(),
            })
            .collect();
        let spans = align_token_spans(text, &entries);
        assert_eq!(spans, vec![(0, 1), (1, 2), (2, 4), (5, 7), (8, 10)]);
    }

    #[test]
    fn length_stats_single_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.jsonl");
        let mut w = JsonlWriter::create(&path).unwrap();
        w.write(&serde_json::json!({"problem_id": "p", "text": "a b c d e f g"}))
            .unwrap();
        let stats = length_stats(&[path], None).unwrap();
        assert_eq!(stats[0].records, 1);
        assert_eq!(stats[0].field, "text");
        assert!((stats[0].mean_tokens - 7.0).abs() < 1e-12);
    }

    #[test]
    fn length_stats_empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            length_stats(&[path], None),
            Err(AnalysisError::EmptyCorpus(_))
        ));
    }

    #[test]
    fn search_counts_group_by_strategy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.jsonl");
        let mut w = JsonlWriter::create(&path).unwrap();
        for (strategy, calls) in [("binary", 4u32), ("binary", 6), ("sequential", 20)] {
            w.write(&serde_json::json!({
                "problem_id": "p", "strategy": strategy, "boundary": 1,
                "prefix_text": "x", "judge_calls": calls,
                "transcript": [], "ratio": 0.5, "flags": []
            }))
            .unwrap();
        }
        let stats = search_count_stats(&[path]).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].strategy, "binary");
        assert!((stats[0].mean_judge_calls - 5.0).abs() < 1e-12);
        assert_eq!(stats[1].strategy, "sequential");
        assert!((stats[1].mean_judge_calls - 20.0).abs() < 1e-12);
    }

    #[test]
    fn preference_parsing() {
        assert_eq!(parse_preference("The better answer is A."), (Preference::A, false));
        assert_eq!(parse_preference("b"), (Preference::B, false));
        assert_eq!(parse_preference("It's a TIE overall"), (Preference::Tie, false));
        assert_eq!(parse_preference("no verdict here"), (Preference::Tie, true));
        // Not fooled by words containing the letters.
        assert_eq!(parse_preference("BAD CASE").0, Preference::Tie);
    }

    #[test]
    fn swapped_presentation_maps_back() {
        // A judge that always prefers whatever sits in the first slot.
        let backend = MockBackend::constant("A");
        let template = PromptTemplate::from_text("{{question}} {{response_a}} {{response_b}}");
        let plain = pairwise_quality_judge(
            "p", "q", "short", "long", &backend, &template, 0.0, false,
        )
        .unwrap();
        let swapped = pairwise_quality_judge(
            "p", "q", "short", "long", &backend, &template, 0.0, true,
        )
        .unwrap();
        assert_eq!(plain.winner, Preference::A);
        // Position-biased judge still picks slot A, which is our B when swapped.
        assert_eq!(swapped.winner, Preference::B);
        assert!(swapped.swapped);
    }

    #[test]
    fn identical_candidates_tie_under_symmetric_mock() {
        let backend = MockBackend::constant("TIE");
        let template = PromptTemplate::from_text("{{question}} {{response_a}} {{response_b}}");
        let rec =
            pairwise_quality_judge("p", "q", "same", "same", &backend, &template, 0.0, false)
                .unwrap();
        assert_eq!(rec.winner, Preference::Tie);
        assert!(!rec.defaulted);
    }

    #[test]
    fn quality_summary_counts() {
        let records = vec![
            ComparisonRecord { problem_id: "1".into(), winner: Preference::A, swapped: false, defaulted: false, raw_text: String::new() },
            ComparisonRecord { problem_id: "2".into(), winner: Preference::B, swapped: true, defaulted: false, raw_text: String::new() },
            ComparisonRecord { problem_id: "3".into(), winner: Preference::A, swapped: false, defaulted: true, raw_text: String::new() },
        ];
        let summary = summarize_quality(&records);
        assert_eq!(summary.wins_a, 2);
        assert_eq!(summary.wins_b, 1);
        assert_eq!(summary.ties, 0);
        assert_eq!(summary.defaulted, 1);
        assert!((summary.win_rate_a - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_escaping() {
        assert_eq!(csv_escape("plain"), "plain");
        assert_eq!(csv_escape("a,b"), "\"a,b\"");
        assert_eq!(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
