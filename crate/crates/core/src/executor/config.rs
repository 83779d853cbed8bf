//! Run configuration file.
//!
//! ```yaml
//! workspace: workspace            # run dirs and cache live here
//! data: {source: corpus, format: txt}
//! split: {strategy: paragraph}
//! relevance: {keywords: [oil, gas]}
//! schema: schema.yaml
//! validation: strict
//! provider: {provider_id: mock, model_id: mock-1, temperature: 0.0, max_output_tokens: 256}
//! providers:
//!   - {kind: mock, provider_id: mock, script: mock.yaml}
//! retry: {max_attempts: 5, base_delay_ms: 1000, factor: 2.0, jitter_fraction: 0.2}
//! cache: {enabled: true, backend: sqlite}
//! pricing: pricing.yaml
//! budget: "1.50"
//! batch_size: 16
//! concurrency: 8
//! seed: 7
//! ```
//!
//! Relative paths resolve against the config file's directory.

use crate::cache::Backend;
use crate::canonical::{sha256_hex, to_canonical_json};
use crate::cost::Money;
use crate::gateway::{GenerationParams, ProviderConfig, RetryPolicy};
use crate::ingest::{Format, SplitStrategy};
use crate::relevance::RelevanceConfig;
use crate::schema::Coercion;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: String,
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub provider_id: String,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
}

fn default_max_output_tokens() -> u32 {
    512
}

impl ModelConfig {
    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub backend: Backend,
}

fn yes() -> bool {
    true
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            backend: Backend::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_workspace")]
    pub workspace: String,
    /// Defaults to `run-` plus a prefix of the config digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<RelevanceConfig>,
    pub schema: String,
    #[serde(default)]
    pub validation: Coercion,
    pub provider: ModelConfig,
    #[serde(default)]
    pub providers: Vec<ProviderConfig>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub cache: CacheConfig,
    pub pricing: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<Money>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cost_sample_size")]
    pub cost_sample_size: usize,
    /// Reference labels (JSON lines), used by evaluate, pareto and lilpro.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Model that rewrites prompts in lilpro; defaults to `provider`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<ModelConfig>,
}

fn default_workspace() -> String {
    "workspace".into()
}
fn default_batch_size() -> usize {
    16
}
fn default_concurrency() -> usize {
    crate::gateway::DEFAULT_CONCURRENCY
}
fn default_cost_sample_size() -> usize {
    20
}
fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

fn absolute(base: &Path, p: &str) -> String {
    let path = Path::new(p);
    let joined = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    normalize(&joined).to_string_lossy().into_owned()
}

/// Lexical `.`/`..` removal; no filesystem access.
fn normalize(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_yaml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its paths.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let cfg = Self::parse(&text).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        Ok(cfg.resolved(&base))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if let Some(b) = self.budget {
            if b < Money::ZERO {
                return Err(ConfigError::Invalid("budget must be non-negative".into()));
            }
        }
        self.split.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.retry.validate().map_err(ConfigError::Invalid)?;
        if let Some(r) = &self.relevance {
            r.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Same config with every path made absolute against `base`.
    pub fn resolved(mut self, base: &Path) -> Self {
        self.workspace = absolute(base, &self.workspace);
        self.data.source = absolute(base, &self.data.source);
        self.schema = absolute(base, &self.schema);
        self.pricing = absolute(base, &self.pricing);
        self.labels = self.labels.map(|l| absolute(base, &l));
        for p in &mut self.providers {
            if let ProviderConfig::Mock { script: Some(s), .. } = p {
                *s = absolute(base, s);
            }
        }
        self
    }

    /// Digest guarding resume against drift. Budget, concurrency and run id
    /// may change between invocations without invalidating a checkpoint.
    pub fn digest(&self, schema_digest: &str) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for volatile in ["budget", "concurrency", "run_id"] {
            obj.remove(volatile);
        }
        obj.insert("schema_digest".into(), schema_digest.into());
        sha256_hex(to_canonical_json(&v).expect("JSON value serializes"))
    }

    pub fn run_id(&self, digest: &str) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("run-{}", &digest[..12]))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }
}
