//! Run configuration: a flat TOML file, overridden by `--set key=value`.
//!
//! Precedence, lowest first: built-in defaults, the config file, then each
//! `--set` in command-line order.

use std::path::{Path, PathBuf};

use crscore::embed::{ProviderConfig, ProviderKind, DEFAULT_REMOTE_MODEL};
use crscore::llm::{LlmClientConfig, RetryPolicy};
use crscore::metric::ThresholdConfig;
use crscore::pseudoref::{AnalyzerSpec, SmellScope};
use serde::Deserialize;

/// A usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    Calibrate,
    PaperBest,
    PaperGt,
}

impl ThresholdMode {
    fn parse(v: &toml::Value) -> anyhow::Result<Self> {
        match v {
            toml::Value::Float(f) => Ok(ThresholdMode::Fixed(*f)),
            toml::Value::Integer(i) => Ok(ThresholdMode::Fixed(*i as f64)),
            toml::Value::String(s) => match s.as_str() {
                "calibrate" => Ok(ThresholdMode::Calibrate),
                "paper-best" => Ok(ThresholdMode::PaperBest),
                "paper-gt" => Ok(ThresholdMode::PaperGt),
                other => other
                    .parse::<f64>()
                    .map(ThresholdMode::Fixed)
                    .map_err(|_| cfg_err(format!("threshold `{other}` is not a number, calibrate, paper-best or paper-gt"))),
            },
            other => Err(cfg_err(format!("threshold has unsupported value {other}"))),
        }
    }

    /// The threshold for every mode except `Calibrate`.
    pub fn resolve(&self) -> Option<crscore::Result<ThresholdConfig>> {
        match self {
            ThresholdMode::Fixed(t) => Some(ThresholdConfig::fixed(*t)),
            ThresholdMode::PaperBest => Some(Ok(ThresholdConfig::paper_best())),
            ThresholdMode::PaperGt => Some(Ok(ThresholdConfig::paper_gt())),
            ThresholdMode::Calibrate => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Md,
    Jsonl,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    changes: Option<PathBuf>,
    reviews: Option<PathBuf>,
    annotations: Option<PathBuf>,
    pseudorefs: Option<PathBuf>,
    scores: Option<PathBuf>,
    baselines: Option<PathBuf>,
    output_dir: PathBuf,
    formats: Vec<Format>,
    timestamped: bool,

    threshold: toml::Value,
    sweep_grid: Vec<f64>,

    provider: String,
    provider_seed: u64,
    provider_url: String,
    provider_model: String,
    embed_batch_size: usize,
    embed_normalize: bool,
    embed_cache_dir: Option<PathBuf>,
    embed_attempts: u32,
    embed_timeout_s: u64,

    claims: bool,
    claims_prompt: Option<PathBuf>,
    llm_endpoint: String,
    llm_model: String,
    llm_temperature: f64,
    llm_max_tokens: u32,
    llm_cache_dir: Option<PathBuf>,
    llm_attempts: u32,
    llm_backoff_s: f64,
    llm_timeout_s: u64,
    llm_response_path: String,

    analyzers: Vec<String>,
    analyzer_specs: Option<PathBuf>,
    smell_scope: String,

    max_in_flight: usize,
    failure_limit: f64,

    ground_truth_system: String,
    exclude_ground_truth: bool,
    bleu_smoothing: bool,
    char_edit_distance: bool,
    laaj: bool,
}

impl Default for RawConfig {
    fn default() -> Self {
        let llm = LlmClientConfig::default();
        let embed = ProviderConfig::default();
        RawConfig {
            changes: None,
            reviews: None,
            annotations: None,
            pseudorefs: None,
            scores: None,
            baselines: None,
            output_dir: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Md, Format::Jsonl],
            timestamped: false,
            threshold: toml::Value::String("paper-best".into()),
            sweep_grid: (0..=20).map(|i| 0.5 + 0.02 * i as f64).collect(),
            provider: "deterministic".into(),
            provider_seed: 0,
            provider_url: "http://127.0.0.1:8089".into(),
            provider_model: DEFAULT_REMOTE_MODEL.into(),
            embed_batch_size: embed.batch_size,
            embed_normalize: embed.normalize,
            embed_cache_dir: None,
            embed_attempts: embed.attempts,
            embed_timeout_s: embed.timeout_s,
            claims: true,
            claims_prompt: None,
            llm_endpoint: llm.endpoint,
            llm_model: llm.model,
            llm_temperature: llm.temperature,
            llm_max_tokens: llm.max_tokens,
            llm_cache_dir: None,
            llm_attempts: llm.retry.attempts,
            llm_backoff_s: llm.retry.backoff_base,
            llm_timeout_s: llm.timeout_s,
            llm_response_path: llm.response_path,
            analyzers: vec!["python-smells".into(), "java-pmd".into(), "javascript-jshint".into()],
            analyzer_specs: None,
            smell_scope: "changed-region".into(),
            max_in_flight: 4,
            failure_limit: 0.05,
            ground_truth_system: "ground_truth".into(),
            exclude_ground_truth: true,
            bleu_smoothing: true,
            char_edit_distance: false,
            laaj: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub changes: Option<PathBuf>,
    pub reviews: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub pseudorefs: PathBuf,
    pub scores: PathBuf,
    pub baselines: PathBuf,
    pub output_dir: PathBuf,
    pub formats: Vec<Format>,
    pub timestamped: bool,
    pub threshold: ThresholdMode,
    pub sweep_grid: Vec<f64>,
    pub provider: ProviderConfig,
    pub claims: bool,
    pub claims_prompt: Option<PathBuf>,
    pub llm: LlmClientConfig,
    pub analyzers: Vec<AnalyzerSpec>,
    pub smell_scope: SmellScope,
    pub max_in_flight: usize,
    pub failure_limit: f64,
    pub ground_truth_system: String,
    pub exclude_ground_truth: bool,
    pub bleu_smoothing: bool,
    pub char_edit_distance: bool,
    pub laaj: bool,
}

/// Parse one `key=value` override. The value is read as a TOML value when
/// possible and as a bare string otherwise.
pub fn parse_override(s: &str) -> anyhow::Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{s}` is not key=value")))?;
    let key = k.trim().to_string();
    if key.is_empty() {
        return Err(cfg_err(format!("override `{s}` has an empty key")));
    }
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((key, value))
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| cfg_err(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| cfg_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let base = path.and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
        Self::from_table(table, &base)
    }

    /// Relative paths in a config file are resolved against `base` (the
    /// config file's directory).
    pub fn from_table(table: toml::Table, base: &Path) -> anyhow::Result<Self> {
        let raw: RawConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(e.message().to_string()))?;
        let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let output_dir = rel(raw.output_dir);

        if raw.max_in_flight == 0 {
            return Err(cfg_err("max_in_flight must be >= 1"));
        }
        if !(0.0..=1.0).contains(&raw.failure_limit) {
            return Err(cfg_err("failure_limit must be within [0, 1]"));
        }
        if raw.formats.is_empty() {
            return Err(cfg_err("formats must name at least one of csv, md, jsonl"));
        }

        let kind = match raw.provider.as_str() {
            "deterministic" => ProviderKind::Deterministic { seed: raw.provider_seed },
            "remote" => ProviderKind::Remote {
                url: raw.provider_url,
                model: raw.provider_model,
            },
            other => return Err(cfg_err(format!("unknown provider `{other}` (deterministic or remote)"))),
        };
        let provider = ProviderConfig {
            kind,
            batch_size: raw.embed_batch_size,
            normalize: raw.embed_normalize,
            cache_dir: raw.embed_cache_dir.map(rel),
            attempts: raw.embed_attempts,
            timeout_s: raw.embed_timeout_s,
        };
        if provider.batch_size == 0 {
            return Err(cfg_err("embed_batch_size must be >= 1"));
        }

        let llm = LlmClientConfig {
            endpoint: raw.llm_endpoint,
            model: raw.llm_model,
            temperature: raw.llm_temperature,
            max_tokens: raw.llm_max_tokens,
            max_in_flight: raw.max_in_flight,
            retry: RetryPolicy {
                attempts: raw.llm_attempts,
                backoff_base: raw.llm_backoff_s,
            },
            cache_dir: raw.llm_cache_dir.map(rel),
            response_path: raw.llm_response_path,
            timeout_s: raw.llm_timeout_s,
        };
        llm.validate().map_err(|e| cfg_err(e.to_string()))?;

        let mut known = AnalyzerSpec::builtin();
        if let Some(p) = raw.analyzer_specs.map(rel) {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| cfg_err(format!("cannot read analyzer specs {}: {e}", p.display())))?;
            let extra: Vec<AnalyzerSpec> =
                serde_json::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
            known.extend(extra);
        }
        let analyzers = raw
            .analyzers
            .iter()
            .map(|name| {
                known
                    .iter()
                    .rev()
                    .find(|s| &s.name == name)
                    .cloned()
                    .ok_or_else(|| cfg_err(format!("unknown analyzer `{name}`")))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let smell_scope = match raw.smell_scope.as_str() {
            "changed-region" => SmellScope::ChangedRegion,
            "whole-file" => SmellScope::WholeFile,
            other => return Err(cfg_err(format!("unknown smell_scope `{other}`"))),
        };

        let threshold = ThresholdMode::parse(&raw.threshold)?;
        if let Some(Err(e)) = threshold.resolve() {
            return Err(cfg_err(e.to_string()));
        }
        if raw.sweep_grid.iter().any(|t| !(0.0..1.0).contains(t) || *t == 0.0) {
            return Err(cfg_err("sweep_grid values must lie in (0, 1)"));
        }

        Ok(RunConfig {
            changes: raw.changes.map(rel),
            reviews: raw.reviews.map(rel),
            annotations: raw.annotations.map(rel),
            pseudorefs: raw.pseudorefs.map(rel).unwrap_or_else(|| output_dir.join("gen-refs-latest.jsonl")),
            scores: raw.scores.map(rel).unwrap_or_else(|| output_dir.join("score-latest.jsonl")),
            baselines: raw.baselines.map(rel).unwrap_or_else(|| output_dir.join("baselines-latest.jsonl")),
            output_dir,
            formats: raw.formats,
            timestamped: raw.timestamped,
            threshold,
            sweep_grid: raw.sweep_grid,
            provider,
            claims: raw.claims,
            claims_prompt: raw.claims_prompt.map(rel),
            llm,
            analyzers,
            smell_scope,
            max_in_flight: raw.max_in_flight,
            failure_limit: raw.failure_limit,
            ground_truth_system: raw.ground_truth_system,
            exclude_ground_truth: raw.exclude_ground_truth,
            bleu_smoothing: raw.bleu_smoothing,
            char_edit_distance: raw.char_edit_distance,
            laaj: raw.laaj,
        })
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> anyhow::Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| cfg_err(format!("`{name}` must be set for this command")))
    }

    /// Systems left out of correlations and rankings.
    pub fn excluded_systems(&self) -> Vec<String> {
        if self.exclude_ground_truth {
            vec![self.ground_truth_system.clone()]
        } else {
            Vec::new()
        }
    }
}
