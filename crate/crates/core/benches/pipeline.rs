//! Parallel vs sequential throughput on the oracle-judged pipeline stages.
//!
//! Run with `cargo bench -p distill-core`. The `parallel` arm uses the rayon
//! path the pipeline runs by default; the `sequential` arm is the fallback
//! used when the `parallel` feature is disabled.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use distill_core::analysis::{chunk_entropy, entropy_per_token};
use distill_core::backend::{Backend, MockBackend, MockScript, Schedule};
use distill_core::corpus::Trajectory;
use distill_core::exec;
use distill_core::judge::{PromptTemplate, ThresholdOracle};
use distill_core::truncate::{binary_search_prefix, sequential_scan_prefix, TruncateOptions};

fn corpus(n: usize, sentences: usize) -> Vec<(Trajectory, usize)> {
    (0..n)
        .map(|i| {
            let text: String = (1..=sentences)
                .map(|s| format!("Step {s} of case {i} holds."))
                .collect::<Vec<_>>()
                .join(" ");
            let threshold = 1 + (i * 7) % sentences;
            (Trajectory::from_raw(format!("b{i}"), &text).unwrap(), threshold)
        })
        .collect()
}

fn run_binary(corpus: &[(Trajectory, usize)], parallel: bool) -> usize {
    let options = TruncateOptions::default();
    let work: Vec<&(Trajectory, usize)> = corpus.iter().collect();
    let decide = |item: &(Trajectory, usize)| {
        let oracle = ThresholdOracle::new(item.1);
        binary_search_prefix(&item.0, "bench question", &oracle, &options)
            .unwrap()
            .boundary
    };
    let boundaries = if parallel {
        exec::par_map(work, decide)
    } else {
        exec::seq_map(work, decide)
    };
    boundaries.iter().sum()
}

fn run_scan(corpus: &[(Trajectory, usize)], parallel: bool) -> usize {
    let work: Vec<&(Trajectory, usize)> = corpus.iter().collect();
    let decide = |item: &(Trajectory, usize)| {
        let oracle = ThresholdOracle::new(item.1);
        sequential_scan_prefix(&item.0, "bench question", &oracle)
            .unwrap()
            .judge_calls as usize
    };
    let calls = if parallel {
        exec::par_map(work, decide)
    } else {
        exec::seq_map(work, decide)
    };
    calls.iter().sum()
}

fn run_entropy(corpus: &[(Trajectory, usize)], backend: &MockBackend, parallel: bool) -> f64 {
    let qa = PromptTemplate::from_text("{{question}}");
    let work: Vec<&(Trajectory, usize)> = corpus.iter().collect();
    let score = |item: &(Trajectory, usize)| {
        chunk_entropy(&item.0, "bench question", backend, &qa, 10)
            .unwrap()
            .chunk_means
            .iter()
            .sum::<f64>()
    };
    let sums = if parallel {
        exec::par_map(work, score)
    } else {
        exec::seq_map(work, score)
    };
    sums.iter().sum()
}

fn bench_truncation(c: &mut Criterion) {
    let data = corpus(400, 170);
    let mut group = c.benchmark_group("binary_search_corpus");
    group.measurement_time(Duration::from_secs(8));
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &p| {
            b.iter(|| black_box(run_binary(&data, p)));
        });
    }
    group.finish();

    let mut group = c.benchmark_group("sequential_scan_corpus");
    group.measurement_time(Duration::from_secs(8));
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &p| {
            b.iter(|| black_box(run_scan(&data, p)));
        });
    }
    group.finish();
}

fn bench_entropy(c: &mut Criterion) {
    let data = corpus(200, 120);
    let backend = MockBackend::new(MockScript {
        rules: Vec::new(),
        default_response: "ok".into(),
        default_schedule: Some(Schedule::Linear { coefficient: -0.003 }),
    })
    .unwrap();
    let mut group = c.benchmark_group("chunk_entropy_corpus");
    group.measurement_time(Duration::from_secs(8));
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &p| {
            b.iter(|| black_box(run_entropy(&data, &backend, p)));
        });
    }
    group.finish();
}

fn bench_scoring_overhead(c: &mut Criterion) {
    let backend = MockBackend::new(MockScript {
        rules: Vec::new(),
        default_response: "ok".into(),
        default_schedule: Some(Schedule::Constant { value: -1.2 }),
    })
    .unwrap();
    let words: Vec<String> = (0..2000).map(|i| format!("tok{i}")).collect();
    let text = words.join(" ");
    let entries = backend.score_tokens("ctx", &text).unwrap();
    c.bench_function("entropy_per_token_2000", |b| {
        b.iter(|| black_box(entropy_per_token(black_box(&entries))));
    });
}

criterion_group!(
    benches,
    bench_truncation,
    bench_entropy,
    bench_scoring_overhead
);
criterion_main!(benches);
