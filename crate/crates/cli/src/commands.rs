//! Command implementations: run-directory management, manifests, resume, and
//! the glue from configuration to the core pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use distill_core::align::{build_dataset, BuildDeps, BuildOptions, BuildPaths};
use distill_core::analysis::{
    chunk_entropy, entropy_csv, length_stats, lengths_csv, pairwise_quality_judge, quality_csv,
    search_count_stats, search_counts_csv, summarize_quality, ChunkEntropyReport,
    ComparisonRecord,
};
use distill_core::backend::{Backend, MockBackend, RemoteBackend};
use distill_core::corpus::{
    load_problems, load_trajectories, read_records, read_records_tolerant_tail,
    write_records_atomic, JsonlWriter, Problem, Trajectory,
};
use distill_core::eval::{evaluate, EvalParams};
use distill_core::exec;
use distill_core::judge::{ModelJudge, PromptTemplate, SufficiencyJudge};
use distill_core::truncate::{run_strategy, DecisionFlag, PrefixDecision, StrategyDeps, TruncateOptions};

use crate::config::{BackendKind, RunConfig};
use crate::{AnalyzeKind, CliError};

/// Environment variable that injects a clean interruption after N records,
/// for resume testing.
pub const ABORT_ENV: &str = "DISTILL_ABORT_AFTER";

fn abort_after_from_env() -> Option<usize> {
    std::env::var(ABORT_ENV).ok().and_then(|v| v.parse().ok())
}

// ---- manifest ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    command: String,
    config_digest: String,
    code_version: String,
    inputs: BTreeMap<String, String>,
}

fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read input {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Create the run directory and reconcile its manifest.
///
/// A matching manifest means this invocation resumes the previous one; a
/// mismatched manifest is a config error so two different experiments never
/// share a directory.
fn prepare_run_dir(
    run_dir: &Path,
    command: &str,
    config: &RunConfig,
    inputs: &[&Path],
) -> Result<(), CliError> {
    std::fs::create_dir_all(run_dir)
        .with_context(|| format!("cannot create run dir {}", run_dir.display()))
        .map_err(CliError::Runtime)?;
    let mut input_digests = BTreeMap::new();
    for path in inputs {
        input_digests.insert(
            path.display().to_string(),
            file_digest(path).map_err(CliError::Runtime)?,
        );
    }
    let manifest = Manifest {
        command: command.to_string(),
        config_digest: config.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: input_digests,
    };
    let manifest_path = run_dir.join("manifest.json");
    if manifest_path.exists() {
        let existing: Manifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path)
                .with_context(|| format!("cannot read {}", manifest_path.display()))
                .map_err(CliError::Runtime)?,
        )
        .map_err(|e| CliError::Config(format!("manifest.json is corrupt: {e}")))?;
        if existing != manifest {
            return Err(CliError::Config(format!(
                "run dir {} was produced by a different command/config/input set; \
                 use a fresh --run-dir or restore the original config",
                run_dir.display()
            )));
        }
        tracing::info!(run_dir = %run_dir.display(), "manifest matches; resuming");
    } else {
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, body)
            .with_context(|| format!("cannot write {}", manifest_path.display()))
            .map_err(CliError::Runtime)?;
    }
    Ok(())
}

// ---- shared loading -----------------------------------------------------------

pub struct Pipeline {
    pub config: RunConfig,
    pub backend: Arc<dyn Backend>,
    pub qa: PromptTemplate,
    pub eval_template: PromptTemplate,
    pub align_template: PromptTemplate,
    pub quality_template: PromptTemplate,
}

impl Pipeline {
    pub fn from_config(config: RunConfig) -> Result<Self, CliError> {
        let diagnostics = config.validate();
        if !diagnostics.is_empty() {
            let listing = diagnostics
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("\n");
            return Err(CliError::Config(listing));
        }
        let backend: Arc<dyn Backend> = match config.backend.kind {
            BackendKind::Mock => {
                let path = config.backend.script_path.as_ref().expect("validated");
                Arc::new(
                    MockBackend::from_script_file(path)
                        .map_err(|e| CliError::Config(e.to_string()))?,
                )
            }
            BackendKind::Remote => Arc::new(
                RemoteBackend::new(config.backend.remote_config())
                    .map_err(|e| CliError::Config(e.to_string()))?,
            ),
        };
        let load = |path: &Path| {
            PromptTemplate::load(path).map_err(|e| CliError::Config(e.to_string()))
        };
        Ok(Pipeline {
            qa: load(&config.prompts.qa)?,
            eval_template: load(&config.prompts.eval)?,
            align_template: load(&config.prompts.align)?,
            quality_template: load(&config.prompts.quality)?,
            backend,
            config,
        })
    }

    fn judge(&self) -> ModelJudge {
        ModelJudge::new(self.backend.clone(), self.eval_template.clone())
            .with_temperature(self.config.temperatures.judge)
            .with_default_label(self.config.options.judge_default)
    }

    fn problems(&self) -> Result<Vec<Problem>, CliError> {
        load_problems(&self.config.paths.problems)
            .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))
    }

    fn trajectories(&self) -> Result<Vec<Trajectory>, CliError> {
        let path = self.config.paths.trajectories.as_ref().ok_or_else(|| {
            CliError::Config("paths.trajectories: required by this command".into())
        })?;
        load_trajectories(path).map_err(|e| CliError::Runtime(anyhow::Error::new(e)))
    }

    fn run_dir(&self) -> &Path {
        &self.config.paths.run_dir
    }

    fn truncate_inputs(&self) -> Vec<&Path> {
        let mut inputs: Vec<&Path> = vec![&self.config.paths.problems];
        if let Some(t) = &self.config.paths.trajectories {
            inputs.push(t);
        }
        inputs
    }
}

// ---- truncate ------------------------------------------------------------------

pub fn cmd_truncate(pipeline: &Pipeline) -> Result<(), CliError> {
    prepare_run_dir(
        pipeline.run_dir(),
        "truncate",
        &pipeline.config,
        &pipeline.truncate_inputs(),
    )?;
    let problems = pipeline.problems()?;
    let trajectories = pipeline.trajectories()?;
    let by_id: BTreeMap<&str, &Trajectory> = trajectories
        .iter()
        .map(|t| (t.problem_id.as_str(), t))
        .collect();

    let decisions_path = pipeline.run_dir().join("decisions.jsonl");
    let (existing, _) = read_records_tolerant_tail::<PrefixDecision>(&decisions_path)
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    let done: std::collections::HashSet<String> =
        existing.iter().map(|d| d.problem_id.clone()).collect();

    let strategy = pipeline.config.strategy.kind();
    let judge = pipeline.judge();
    let options = TruncateOptions {
        final_verification: pipeline.config.options.final_verification,
    };
    let abort_after = abort_after_from_env();
    let processed = AtomicUsize::new(0);
    let writer = Mutex::new(
        JsonlWriter::append(&decisions_path)
            .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?,
    );
    let skipped = AtomicUsize::new(0);

    let pending: Vec<&Problem> = problems.iter().filter(|p| !done.contains(&p.id)).collect();
    let results: Vec<Option<()>> = exec::par_map(pending, |problem| {
        if let Some(limit) = abort_after {
            if processed.load(Ordering::SeqCst) >= limit {
                return None;
            }
        }
        let Some(trajectory) = by_id.get(problem.id.as_str()) else {
            tracing::warn!(problem_id = %problem.id, "no trajectory; skipping");
            skipped.fetch_add(1, Ordering::SeqCst);
            processed.fetch_add(1, Ordering::SeqCst);
            return Some(());
        };
        let deps = StrategyDeps {
            judge: Some(&judge as &dyn SufficiencyJudge),
            backend: Some(&*pipeline.backend),
            qa_template: Some(&pipeline.qa),
        };
        match run_strategy(trajectory, &problem.question, &strategy, &deps, &options) {
            Ok(decision) => {
                writer.lock().unwrap().write(&decision).ok();
            }
            Err(e) => {
                tracing::warn!(problem_id = %problem.id, error = %e, "truncation failed");
                skipped.fetch_add(1, Ordering::SeqCst);
            }
        }
        processed.fetch_add(1, Ordering::SeqCst);
        Some(())
    });
    if results.iter().any(|r| r.is_none()) {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "interrupted after {} problems; rerun to resume",
            processed.load(Ordering::SeqCst)
        )));
    }

    // Finalize: stable order by problem id.
    let (mut all, _) = read_records_tolerant_tail::<PrefixDecision>(&decisions_path)
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    all.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    all.dedup_by(|a, b| a.problem_id == b.problem_id);
    write_records_atomic(&decisions_path, &all)
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;

    let n = all.len().max(1) as f64;
    let mean_calls = all.iter().map(|d| d.judge_calls as f64).sum::<f64>() / n;
    let mean_ratio = all.iter().map(|d| d.ratio).sum::<f64>() / n;
    let insufficient = all
        .iter()
        .filter(|d| d.flags.contains(&DecisionFlag::InsufficientFull))
        .count();
    let defaulted = all
        .iter()
        .filter(|d| d.flags.contains(&DecisionFlag::DefaultedVerdicts))
        .count();
    println!(
        "truncate: {} decisions ({} skipped) | strategy {} | mean judge calls {:.2} | mean ratio {:.3} | insufficient_full {} | defaulted_verdicts {}",
        all.len(),
        skipped.load(Ordering::SeqCst),
        strategy.id(),
        mean_calls,
        mean_ratio,
        insufficient,
        defaulted,
    );
    println!("decisions: {}", decisions_path.display());
    Ok(())
}

// ---- build ---------------------------------------------------------------------

pub fn cmd_build(pipeline: &Pipeline) -> Result<(), CliError> {
    prepare_run_dir(
        pipeline.run_dir(),
        "build",
        &pipeline.config,
        &pipeline.truncate_inputs(),
    )?;
    let problems = pipeline.problems()?;
    let trajectories = pipeline.trajectories()?;
    let judge = pipeline.judge();
    let deps = BuildDeps {
        backend: &*pipeline.backend,
        judge: &judge,
        qa_template: &pipeline.qa,
        align_template: &pipeline.align_template,
    };
    let options = BuildOptions {
        max_attempts: pipeline.config.options.max_attempts,
        extract_from: pipeline.config.options.extract_from,
        exclude_insufficient_full: pipeline.config.options.exclude_insufficient_full,
        joiner: "\n".to_string(),
        continuation_temperature: pipeline.config.temperatures.continuation,
        max_new_tokens: pipeline.config.options.max_new_tokens,
        seed: pipeline.config.options.seed,
        truncate: TruncateOptions {
            final_verification: pipeline.config.options.final_verification,
        },
        abort_after_records: abort_after_from_env(),
    };
    let paths = BuildPaths::in_dir(pipeline.run_dir());
    let summary = build_dataset(
        &problems,
        &trajectories,
        &pipeline.config.strategy.kind(),
        &deps,
        &options,
        &paths,
    )
    .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    println!("dataset: {}", paths.dataset.display());
    println!("audit:   {}", paths.audit.display());
    Ok(())
}

// ---- analyze -------------------------------------------------------------------

pub fn cmd_analyze(pipeline: &Pipeline, which: AnalyzeKind) -> Result<(), CliError> {
    match which {
        AnalyzeKind::Entropy => analyze_entropy(pipeline),
        AnalyzeKind::Lengths => analyze_lengths(pipeline),
        AnalyzeKind::SearchCounts => analyze_search_counts(pipeline),
        AnalyzeKind::Quality => analyze_quality(pipeline),
    }
}

fn write_report<T: Serialize>(
    run_dir: &Path,
    stem: &str,
    report: &T,
    csv: String,
) -> Result<(PathBuf, PathBuf), CliError> {
    let json_path = run_dir.join(format!("{stem}.json"));
    let csv_path = run_dir.join(format!("{stem}.csv"));
    let body = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json_path, body)
        .and_then(|_| std::fs::write(&csv_path, csv))
        .with_context(|| format!("cannot write report {stem}"))
        .map_err(CliError::Runtime)?;
    Ok((json_path, csv_path))
}

fn analyze_entropy(pipeline: &Pipeline) -> Result<(), CliError> {
    prepare_run_dir(
        pipeline.run_dir(),
        "analyze:entropy",
        &pipeline.config,
        &pipeline.truncate_inputs(),
    )?;
    let problems = pipeline.problems()?;
    let question_by_id: BTreeMap<&str, &str> = problems
        .iter()
        .map(|p| (p.id.as_str(), p.question.as_str()))
        .collect();
    let trajectories = pipeline.trajectories()?;
    let n_chunks = pipeline.config.options.n_chunks;

    let work: Vec<&Trajectory> = trajectories.iter().collect();
    let reports: Vec<Result<ChunkEntropyReport, String>> = exec::par_map(work, |trajectory| {
        let question = question_by_id
            .get(trajectory.problem_id.as_str())
            .copied()
            .unwrap_or("");
        chunk_entropy(trajectory, question, &*pipeline.backend, &pipeline.qa, n_chunks)
            .map_err(|e| format!("{}: {e}", trajectory.problem_id))
    });
    let mut ok = Vec::new();
    for report in reports {
        match report {
            Ok(r) => ok.push(r),
            Err(e) => tracing::warn!(error = %e, "entropy scoring failed"),
        }
    }
    if ok.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "no trajectory could be scored; does the backend support scoring?"
        )));
    }
    ok.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));
    let csv = entropy_csv(&ok);
    let (json_path, csv_path) = write_report(pipeline.run_dir(), "entropy", &ok, csv)?;
    println!(
        "entropy: {} trajectories x {} chunks ({})",
        ok.len(),
        n_chunks,
        match ok[0].estimator {
            distill_core::analysis::EntropyEstimator::FullTopk => "full_topk",
            distill_core::analysis::EntropyEstimator::SurprisalProxy => "surprisal_proxy",
        },
    );
    println!("reports: {} / {}", json_path.display(), csv_path.display());
    Ok(())
}

fn analyze_lengths(pipeline: &Pipeline) -> Result<(), CliError> {
    let files = &pipeline.config.analyze.lengths_files;
    if files.is_empty() {
        return Err(CliError::Config(
            "analyze.lengths_files: at least one file is required".into(),
        ));
    }
    let inputs: Vec<&Path> = files.iter().map(|p| p.as_path()).collect();
    prepare_run_dir(pipeline.run_dir(), "analyze:lengths", &pipeline.config, &inputs)?;
    let stats = length_stats(files, pipeline.config.analyze.lengths_field.as_deref())
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    let csv = lengths_csv(&stats);
    let (json_path, csv_path) = write_report(pipeline.run_dir(), "lengths", &stats, csv)?;
    for s in &stats {
        println!("{}: {} records, mean {} tokens ({})", s.file, s.records, s.mean_tokens, s.field);
    }
    println!("reports: {} / {}", json_path.display(), csv_path.display());
    Ok(())
}

fn analyze_search_counts(pipeline: &Pipeline) -> Result<(), CliError> {
    let files = &pipeline.config.analyze.decisions_files;
    if files.is_empty() {
        return Err(CliError::Config(
            "analyze.decisions_files: at least one decision file is required".into(),
        ));
    }
    let inputs: Vec<&Path> = files.iter().map(|p| p.as_path()).collect();
    prepare_run_dir(pipeline.run_dir(), "analyze:search-counts", &pipeline.config, &inputs)?;
    let stats = search_count_stats(files).map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    let csv = search_counts_csv(&stats);
    let (json_path, csv_path) = write_report(pipeline.run_dir(), "search_counts", &stats, csv)?;
    for s in &stats {
        println!(
            "{}: {} decisions, mean judge calls {:.2}, mean ratio {:.3}",
            s.strategy, s.decisions, s.mean_judge_calls, s.mean_ratio
        );
    }
    println!("reports: {} / {}", json_path.display(), csv_path.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CandidateRecord {
    problem_id: String,
    text: String,
}

fn analyze_quality(pipeline: &Pipeline) -> Result<(), CliError> {
    let (path_a, path_b) = match (
        &pipeline.config.analyze.quality_a,
        &pipeline.config.analyze.quality_b,
    ) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => {
            return Err(CliError::Config(
                "analyze.quality_a / analyze.quality_b: both candidate files are required".into(),
            ))
        }
    };
    prepare_run_dir(
        pipeline.run_dir(),
        "analyze:quality",
        &pipeline.config,
        &[&pipeline.config.paths.problems, &path_a, &path_b],
    )?;
    let problems = pipeline.problems()?;
    let question_by_id: BTreeMap<&str, &str> = problems
        .iter()
        .map(|p| (p.id.as_str(), p.question.as_str()))
        .collect();
    let a: Vec<CandidateRecord> =
        read_records(&path_a).map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    let b: Vec<CandidateRecord> =
        read_records(&path_b).map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    let b_by_id: BTreeMap<&str, &str> = b
        .iter()
        .map(|r| (r.problem_id.as_str(), r.text.as_str()))
        .collect();

    // Presentation order is randomized per comparison and recorded.
    let mut rng = ChaCha8Rng::seed_from_u64(pipeline.config.options.seed);
    let work: Vec<(usize, &CandidateRecord, bool)> = a
        .iter()
        .enumerate()
        .filter(|(_, rec)| b_by_id.contains_key(rec.problem_id.as_str()))
        .map(|(i, rec)| (i, rec, rng.random_bool(0.5)))
        .collect();

    let temperature = pipeline.config.temperatures.eval;
    let records: Vec<Result<ComparisonRecord, String>> =
        exec::par_map(work, |(_, rec, swap)| {
            let question = question_by_id
                .get(rec.problem_id.as_str())
                .copied()
                .unwrap_or("");
            pairwise_quality_judge(
                &rec.problem_id,
                question,
                &rec.text,
                b_by_id[rec.problem_id.as_str()],
                &*pipeline.backend,
                &pipeline.quality_template,
                temperature,
                swap,
            )
            .map_err(|e| format!("{}: {e}", rec.problem_id))
        });
    let mut ok: Vec<ComparisonRecord> = Vec::new();
    for record in records {
        match record {
            Ok(r) => ok.push(r),
            Err(e) => tracing::warn!(error = %e, "comparison failed"),
        }
    }
    ok.sort_by(|x, y| x.problem_id.cmp(&y.problem_id));
    let summary = summarize_quality(&ok);
    let csv = quality_csv(&ok);
    #[derive(Serialize)]
    struct QualityReport {
        summary: distill_core::analysis::QualitySummary,
        comparisons: Vec<ComparisonRecord>,
    }
    let report = QualityReport { summary, comparisons: ok };
    let (json_path, csv_path) = write_report(pipeline.run_dir(), "quality", &report, csv)?;
    println!(
        "quality: {} comparisons | A wins {:.1}% | B wins {:.1}% | ties {} | defaulted {}",
        report.summary.comparisons,
        report.summary.win_rate_a * 100.0,
        report.summary.win_rate_b * 100.0,
        report.summary.ties,
        report.summary.defaulted,
    );
    println!("reports: {} / {}", json_path.display(), csv_path.display());
    Ok(())
}

// ---- eval ----------------------------------------------------------------------

pub fn cmd_eval(pipeline: &Pipeline) -> Result<(), CliError> {
    prepare_run_dir(
        pipeline.run_dir(),
        "eval",
        &pipeline.config,
        &[&pipeline.config.paths.problems],
    )?;
    let problems = pipeline.problems()?;
    let dataset_name = pipeline
        .config
        .paths
        .problems
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".to_string());
    let params = EvalParams {
        dataset_name,
        k: pipeline.config.options.k,
        temperature: pipeline.config.temperatures.eval,
        max_new_tokens: pipeline.config.options.max_new_tokens,
        seed: pipeline.config.options.seed,
        abort_after_samples: abort_after_from_env(),
    };
    let samples_path = pipeline.run_dir().join("samples.jsonl");
    let result = evaluate(
        &problems,
        &*pipeline.backend,
        &pipeline.qa,
        &params,
        Some(&samples_path),
    )
    .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    let result_path = pipeline.run_dir().join("eval.json");
    std::fs::write(
        &result_path,
        serde_json::to_string_pretty(&result).expect("result serializes"),
    )
    .with_context(|| format!("cannot write {}", result_path.display()))
    .map_err(CliError::Runtime)?;
    println!(
        "eval {}: {} problems, k={} | pass@1 {:.4} | pass@{} {:.4}",
        result.dataset_name,
        result.per_problem.len(),
        result.k,
        result.pass_at_1,
        result.k,
        result.pass_at_k,
    );
    println!("result: {}", result_path.display());
    println!("samples: {}", samples_path.display());
    Ok(())
}

// ---- validate ------------------------------------------------------------------

pub fn cmd_validate(config: &RunConfig) -> Result<(), CliError> {
    let diagnostics = config.validate();
    if diagnostics.is_empty() {
        println!("config valid");
        println!("  strategy:  {}", config.strategy.kind().id());
        println!(
            "  backend:   {}",
            match config.backend.kind {
                BackendKind::Mock => format!(
                    "mock ({})",
                    config
                        .backend
                        .script_path
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default()
                ),
                BackendKind::Remote => format!(
                    "remote ({} / {})",
                    config.backend.base_url.as_deref().unwrap_or(""),
                    config.backend.model.as_deref().unwrap_or("")
                ),
            }
        );
        println!("  run dir:   {}", config.paths.run_dir.display());
        println!("  digest:    {}", config.digest());
        Ok(())
    } else {
        let listing = diagnostics
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        Err(CliError::Config(listing))
    }
}
