//! Run configuration: a single TOML file with nested sections, every option
//! defaulted, CLI flags overriding file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use distill_core::backend::{RemoteConfig, RetryPolicy, ScoringMode};
use distill_core::judge::JudgeLabel;
use distill_core::truncate::{SegmentKind, StrategyKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub prompts: PromptsConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub temperatures: TemperaturesConfig,
    pub paths: PathsConfig,
    #[serde(default)]
    pub options: OptionsConfig,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Mock script path (JSON rules file).
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_multiplier")]
    pub backoff_multiplier: f64,
    #[serde(default = "default_backoff_max_ms")]
    pub backoff_max_ms: u64,
    #[serde(default = "default_scoring")]
    pub scoring: ScoringMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            script_path: None,
            base_url: None,
            model: None,
            auth_env_var: None,
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
            max_attempts: default_attempts(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_multiplier: default_backoff_multiplier(),
            backoff_max_ms: default_backoff_max_ms(),
            scoring: default_scoring(),
        }
    }
}

fn default_max_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_attempts() -> u32 {
    5
}
fn default_backoff_base_ms() -> u64 {
    1_000
}
fn default_backoff_multiplier() -> f64 {
    2.0
}
fn default_backoff_max_ms() -> u64 {
    30_000
}
fn default_scoring() -> ScoringMode {
    ScoringMode::None
}

impl BackendConfig {
    pub fn remote_config(&self) -> RemoteConfig {
        RemoteConfig {
            base_url: self.base_url.clone().unwrap_or_default(),
            model: self.model.clone().unwrap_or_default(),
            api_key_env: self.auth_env_var.clone(),
            max_in_flight: self.max_in_flight,
            timeout_secs: self.timeout_secs,
            retry: RetryPolicy {
                max_attempts: self.max_attempts,
                base_delay_ms: self.backoff_base_ms,
                multiplier: self.backoff_multiplier,
                max_delay_ms: self.backoff_max_ms,
            },
            scoring: self.scoring,
            scoring_top_logprobs: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptsConfig {
    #[serde(default = "default_qa_template")]
    pub qa: PathBuf,
    #[serde(default = "default_eval_template")]
    pub eval: PathBuf,
    #[serde(default = "default_align_template")]
    pub align: PathBuf,
    #[serde(default = "default_quality_template")]
    pub quality: PathBuf,
}

impl Default for PromptsConfig {
    fn default() -> Self {
        PromptsConfig {
            qa: default_qa_template(),
            eval: default_eval_template(),
            align: default_align_template(),
            quality: default_quality_template(),
        }
    }
}

fn default_qa_template() -> PathBuf {
    PathBuf::from("templates/qa.txt")
}
fn default_eval_template() -> PathBuf {
    PathBuf::from("templates/eval.txt")
}
fn default_align_template() -> PathBuf {
    PathBuf::from("templates/align.txt")
}
fn default_quality_template() -> PathBuf {
    PathBuf::from("templates/quality.txt")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct StrategyConfig {
    pub kind: StrategyName,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_n_tokens")]
    pub n_tokens: usize,
    #[serde(default = "default_segment")]
    pub which: SegmentKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Binary,
    Sequential,
    FixedRatio,
    FixedTokens,
    Segment,
    Infogain,
    Full,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyName::Binary,
            ratio: default_ratio(),
            n_tokens: default_n_tokens(),
            which: default_segment(),
            tau: default_tau(),
        }
    }
}

fn default_ratio() -> f64 {
    0.5
}
fn default_n_tokens() -> usize {
    32
}
fn default_segment() -> SegmentKind {
    SegmentKind::Prefix
}
fn default_tau() -> f64 {
    0.5
}

impl StrategyConfig {
    pub fn kind(&self) -> StrategyKind {
        match self.kind {
            StrategyName::Binary => StrategyKind::Binary,
            StrategyName::Sequential => StrategyKind::Sequential,
            StrategyName::FixedRatio => StrategyKind::FixedRatio(self.ratio),
            StrategyName::FixedTokens => StrategyKind::FixedTokens(self.n_tokens),
            StrategyName::Segment => StrategyKind::Segment(self.which),
            StrategyName::Infogain => StrategyKind::InfoGain(self.tau),
            StrategyName::Full => StrategyKind::Full,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperaturesConfig {
    #[serde(default = "default_judge_temp")]
    pub judge: f64,
    #[serde(default = "default_gen_temp")]
    pub continuation: f64,
    #[serde(default = "default_gen_temp")]
    pub eval: f64,
}

impl Default for TemperaturesConfig {
    fn default() -> Self {
        TemperaturesConfig {
            judge: default_judge_temp(),
            continuation: default_gen_temp(),
            eval: default_gen_temp(),
        }
    }
}

fn default_judge_temp() -> f64 {
    0.0
}
fn default_gen_temp() -> f64 {
    0.7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub problems: PathBuf,
    #[serde(default)]
    pub trajectories: Option<PathBuf>,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct OptionsConfig {
    #[serde(default = "default_one")]
    pub max_attempts: u32,
    #[serde(default)]
    pub final_verification: bool,
    #[serde(default = "default_n_chunks")]
    pub n_chunks: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "default_extract_from")]
    pub extract_from: distill_core::align::ExtractFrom,
    #[serde(default)]
    pub exclude_insufficient_full: bool,
    /// Label applied when a judge verdict cannot be parsed.
    #[serde(default = "default_judge_label")]
    pub judge_default: JudgeLabel,
}

impl Default for OptionsConfig {
    fn default() -> Self {
        OptionsConfig {
            max_attempts: default_one(),
            final_verification: false,
            n_chunks: default_n_chunks(),
            k: default_k(),
            seed: 0,
            max_new_tokens: default_max_new_tokens(),
            extract_from: default_extract_from(),
            exclude_insufficient_full: false,
            judge_default: default_judge_label(),
        }
    }
}

fn default_one() -> u32 {
    1
}
fn default_n_chunks() -> usize {
    10
}
fn default_k() -> usize {
    3
}
fn default_max_new_tokens() -> u32 {
    4096
}
fn default_extract_from() -> distill_core::align::ExtractFrom {
    distill_core::align::ExtractFrom::Continuation
}
fn default_judge_label() -> JudgeLabel {
    JudgeLabel::NotEnough
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct AnalyzeConfig {
    /// JSONL files whose text field lengths are averaged by `analyze lengths`.
    #[serde(default)]
    pub lengths_files: Vec<PathBuf>,
    /// Explicit field name; auto-detected when omitted.
    #[serde(default)]
    pub lengths_field: Option<String>,
    /// Decision files consumed by `analyze search-counts`.
    #[serde(default)]
    pub decisions_files: Vec<PathBuf>,
    /// Candidate answer files (`{problem_id, text}` JSONL) for `analyze quality`.
    #[serde(default)]
    pub quality_a: Option<PathBuf>,
    #[serde(default)]
    pub quality_b: Option<PathBuf>,
}

/// A config problem tied to the field path that caused it.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Stable digest of the resolved configuration.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Validate every referenced path and parameter; one diagnostic per issue.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut check_file = |field: &str, path: &Path| {
            if !path.is_file() {
                out.push(Diagnostic {
                    field: field.to_string(),
                    message: format!("file not found: {}", path.display()),
                });
            }
        };
        check_file("paths.problems", &self.paths.problems);
        if let Some(trajectories) = &self.paths.trajectories {
            check_file("paths.trajectories", trajectories);
        }
        check_file("prompts.qa", &self.prompts.qa);
        check_file("prompts.eval", &self.prompts.eval);
        check_file("prompts.align", &self.prompts.align);
        check_file("prompts.quality", &self.prompts.quality);

        match self.backend.kind {
            BackendKind::Mock => match &self.backend.script_path {
                None => out.push(Diagnostic {
                    field: "backend.script_path".into(),
                    message: "mock backend needs a script file".into(),
                }),
                Some(path) => {
                    if !path.is_file() {
                        out.push(Diagnostic {
                            field: "backend.script_path".into(),
                            message: format!("file not found: {}", path.display()),
                        });
                    } else if let Err(e) = distill_core::backend::MockScript::from_file(path) {
                        out.push(Diagnostic {
                            field: "backend.script_path".into(),
                            message: e.to_string(),
                        });
                    }
                }
            },
            BackendKind::Remote => {
                if self.backend.base_url.as_deref().unwrap_or("").is_empty() {
                    out.push(Diagnostic {
                        field: "backend.base_url".into(),
                        message: "remote backend needs a base_url".into(),
                    });
                }
                if self.backend.model.as_deref().unwrap_or("").is_empty() {
                    out.push(Diagnostic {
                        field: "backend.model".into(),
                        message: "remote backend needs a model name".into(),
                    });
                }
            }
        }

        if !(self.strategy.ratio > 0.0 && self.strategy.ratio < 1.0) {
            out.push(Diagnostic {
                field: "strategy.ratio".into(),
                message: format!("must lie in (0, 1), got {}", self.strategy.ratio),
            });
        }
        if self.strategy.n_tokens == 0 {
            out.push(Diagnostic {
                field: "strategy.n_tokens".into(),
                message: "must be >= 1".into(),
            });
        }
        if !(self.strategy.tau > 0.0 && self.strategy.tau < 1.0) {
            out.push(Diagnostic {
                field: "strategy.tau".into(),
                message: format!("must lie in (0, 1), got {}", self.strategy.tau),
            });
        }
        for (field, value) in [
            ("temperatures.judge", self.temperatures.judge),
            ("temperatures.continuation", self.temperatures.continuation),
            ("temperatures.eval", self.temperatures.eval),
        ] {
            if !value.is_finite() || value < 0.0 {
                out.push(Diagnostic {
                    field: field.into(),
                    message: format!("must be finite and >= 0, got {value}"),
                });
            }
        }
        if self.options.k == 0 {
            out.push(Diagnostic {
                field: "options.k".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.options.n_chunks == 0 {
            out.push(Diagnostic {
                field: "options.n_chunks".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.options.max_attempts == 0 {
            out.push(Diagnostic {
                field: "options.max_attempts".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.options.max_new_tokens == 0 {
            out.push(Diagnostic {
                field: "options.max_new_tokens".into(),
                message: "must be >= 1".into(),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml(dir: &Path) -> String {
        format!(
            "[paths]\nproblems = \"{0}/problems.jsonl\"\nrun_dir = \"{0}/run\"\n",
            dir.display()
        )
    }

    #[test]
    fn defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let config: RunConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        assert_eq!(config.options.k, 3);
        assert_eq!(config.options.n_chunks, 10);
        assert_eq!(config.temperatures.judge, 0.0);
        assert_eq!(config.temperatures.continuation, 0.7);
        assert_eq!(config.backend.max_in_flight, 4);
        assert_eq!(config.backend.max_attempts, 5);
        assert!(matches!(config.strategy.kind(), StrategyKind::Binary));
    }

    #[test]
    fn digest_is_deterministic_and_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let a: RunConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        let b: RunConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.options.seed = 99;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn validate_names_field_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut config: RunConfig = toml::from_str(&minimal_toml(dir.path())).unwrap();
        config.prompts.eval = dir.path().join("missing-template.txt");
        let diagnostics = config.validate();
        assert!(
            diagnostics.iter().any(|d| d.field == "prompts.eval"),
            "{diagnostics:?}"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let raw = format!("{}\n[typo_section]\nx = 1\n", minimal_toml(dir.path()));
        assert!(toml::from_str::<RunConfig>(&raw).is_err());
    }
}
