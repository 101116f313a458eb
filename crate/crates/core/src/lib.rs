//! Core library for building prefix-aligned reasoning-distillation datasets.
//!
//! The pipeline takes teacher-generated reasoning trajectories, truncates each
//! one to a short prefix that a student model judges sufficient (binary search
//! over sentence boundaries), asks the student to complete the prefix, filters
//! completions by answer correctness, and emits SFT-ready JSONL datasets. It
//! also ships the baseline truncation strategies, trajectory analytics, and a
//! Pass@k evaluation harness used to study those datasets.
//!
//! Modules map onto pipeline stages:
//!
//! - [`corpus`]: data model, sentence segmentation, tokenization, JSONL I/O
//! - [`backend`]: model inference (OpenAI-compatible HTTP client + scripted mock)
//! - [`judge`]: prompt templates and ENOUGH/NOT_ENOUGH verdict parsing
//! - [`truncate`]: prefix-selection strategies (binary search, scan, fixed, ...)
//! - [`align`]: continuation generation, answer filtering, dataset building
//! - [`analysis`]: entropy/length/search-count analytics and quality judging
//! - [`eval`]: Pass@1 / Pass@k evaluation harness
//!
//! Per-problem work is data-parallel and runs on rayon when the default
//! `parallel` feature is enabled; disabling it falls back to sequential
//! execution with identical outputs.

pub mod align;
pub mod analysis;
pub mod backend;
pub mod corpus;
pub mod eval;
pub mod exec;
pub mod judge;
pub mod truncate;
