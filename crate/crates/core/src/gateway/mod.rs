//! Provider gateway: routes fully materialized requests to registered
//! providers with exponential-backoff retries.
//!
//! The gateway knows nothing about caching or validation; every [`Gateway::send`]
//! is exactly one logical provider interaction (possibly several attempts).

mod http;
mod mock;

pub use http::{HttpProfile, HttpProvider, UsageFields};
pub use mock::{MissPolicy, MockMode, MockProvider, MockRule, MockScript};

use crate::canonical::{canonical_json, sha256_hex};
use crate::cost::{approx_tokens, TokenUsage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 512,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub provider_id: String,
    pub model_id: String,
    pub system_prompt: String,
    pub user_prompt: String,
    /// Digest of the extraction schema; empty for free-text requests.
    pub schema_digest: String,
    pub params: GenerationParams,
    /// Structured-output description sent to the provider. Covered by
    /// `schema_digest`, so it is not part of the canonical form.
    #[serde(skip)]
    pub response_schema: Option<Arc<Value>>,
}

impl ProviderRequest {
    /// Sorted keys, no whitespace, temperature with six decimals.
    pub fn canonical(&self) -> String {
        let mut params = serde_json::Map::new();
        params.insert("max_output_tokens".into(), json!(self.params.max_output_tokens));
        params.insert("seed".into(), self.params.seed.map_or(Value::Null, Value::from));
        // Always a float, so 0 and 0.0 agree.
        params.insert("temperature".into(), float_value(self.params.temperature));
        canonical_json(&json!({
            "provider_id": self.provider_id,
            "model_id": self.model_id,
            "system_prompt": self.system_prompt,
            "user_prompt": self.user_prompt,
            "schema_digest": self.schema_digest,
            "params": Value::Object(params),
        }))
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical())
    }

    /// Token estimate for the prompt side, as used by the budget check.
    pub fn approx_input_tokens(&self) -> u64 {
        approx_tokens(&self.system_prompt) + approx_tokens(&self.user_prompt)
    }
}

fn float_value(x: f64) -> Value {
    serde_json::Number::from_f64(x)
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub body: String,
    pub usage: TokenUsage,
    pub latency: Duration,
    pub attempts: u32,
    pub from_cache: bool,
    /// Backoff waits taken before each retry, in order.
    #[serde(default)]
    pub backoff: Vec<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    /// HTTP 429.
    RateLimited,
    /// HTTP 5xx.
    ServerError,
    Timeout,
    /// Connection refused, DNS failure and the like.
    Transport,
    /// HTTP 401/403 or missing credentials.
    Auth,
    /// Any other 4xx, or an unusable response.
    InvalidRequest,
    /// Mock provider had no rule for the request.
    ScriptMiss,
}

impl ErrorClass {
    pub fn from_status(status: u16) -> Self {
        match status {
            429 => ErrorClass::RateLimited,
            401 | 403 => ErrorClass::Auth,
            500..=599 => ErrorClass::ServerError,
            _ => ErrorClass::InvalidRequest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderError {
    pub class: ErrorClass,
    pub status: Option<u16>,
    pub message: String,
}

impl ProviderError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            status: None,
            message: message.into(),
        }
    }

    pub fn status(status: u16, message: impl Into<String>) -> Self {
        Self {
            class: ErrorClass::from_status(status),
            status: Some(status),
            message: message.into(),
        }
    }
}

impl fmt::Display for ProviderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Some(s) => write!(f, "{:?} (HTTP {s}): {}", self.class, self.message),
            None => write!(f, "{:?}: {}", self.class, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no provider registered as `{0}`")]
    UnknownProvider(String),
    #[error("provider `{0}` already registered")]
    DuplicateProvider(String),
    #[error("gave up after {} attempts; last error: {}", .errors.len(), .errors.last().map(|e| e.to_string()).unwrap_or_default())]
    ExhaustedRetries { errors: Vec<ProviderError> },
    #[error("non-retryable provider error: {0}")]
    NonRetryable(ProviderError),
    #[error("transport error: {0}")]
    Transport(ProviderError),
    #[error("provider config: {0}")]
    Config(String),
}

impl GatewayError {
    /// Attempts consumed before the error surfaced.
    pub fn attempts(&self) -> u32 {
        match self {
            GatewayError::ExhaustedRetries { errors } => errors.len() as u32,
            GatewayError::NonRetryable(_) | GatewayError::Transport(_) => 1,
            _ => 0,
        }
    }
}

/// Raw provider output before the gateway wraps it.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReply {
    pub body: String,
    /// `None` when the provider does not report usage.
    pub usage: Option<TokenUsage>,
}

/// One attempt against an LLM backend. Must be safe under concurrent calls.
pub trait Provider: Send + Sync {
    fn call(&self, req: &ProviderRequest) -> Result<RawReply, ProviderError>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested waits without sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    pub waits: Mutex<Vec<Duration>>,
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.waits.lock().unwrap().push(d);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(rename = "base_delay_ms", with = "millis")]
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter_fraction: f64,
    pub retryable: BTreeSet<ErrorClass>,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter_fraction: 0.2,
            retryable: [ErrorClass::RateLimited, ErrorClass::ServerError, ErrorClass::Timeout]
                .into_iter()
                .collect(),
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        if !(self.factor > 1.0) {
            return Err(format!("factor must exceed 1, got {}", self.factor));
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(format!("jitter_fraction must lie in [0, 1), got {}", self.jitter_fraction));
        }
        Ok(())
    }

    /// Un-jittered wait after failed attempt `n` (0-based): `base * factor^n`.
    pub fn nominal_delay(&self, n: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(n as i32))
    }

    /// Wait scaled by `scale`, which must lie in `[1 - j, 1 + j]`.
    pub fn jittered_delay(&self, n: u32, scale: f64) -> Duration {
        self.nominal_delay(n).mul_f64(scale)
    }
}

/// Counting semaphore that also tracks the peak number of holders.
#[derive(Debug)]
struct Limiter {
    capacity: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct Slot<'a>(&'a Limiter);

impl Limiter {
    fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Slot<'_> {
        let mut n = self.in_use.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.capacity {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Slot(self)
    }
}

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_use.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Provider config as written in a run config's `providers:` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Mock {
        provider_id: String,
        /// Path to a mock script file, relative to the config.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inline: Option<MockScript>,
    },
    Http(HttpProfile),
}

impl ProviderConfig {
    pub fn provider_id(&self) -> &str {
        match self {
            ProviderConfig::Mock { provider_id, .. } => provider_id,
            ProviderConfig::Http(p) => &p.provider_id,
        }
    }

    pub fn build(&self, base_dir: &Path) -> Result<Arc<dyn Provider>, GatewayError> {
        match self {
            ProviderConfig::Mock { script, inline, .. } => {
                let script = match (script, inline) {
                    (_, Some(s)) => s.clone(),
                    (Some(path), None) => {
                        let path = base_dir.join(path);
                        let text = std::fs::read_to_string(&path)
                            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
                        MockScript::parse(&text).map_err(GatewayError::Config)?
                    }
                    (None, None) => MockScript::default(),
                };
                Ok(Arc::new(MockProvider::new(script).map_err(GatewayError::Config)?))
            }
            ProviderConfig::Http(profile) => Ok(Arc::new(HttpProvider::new(profile.clone()))),
        }
    }
}

/// Routes requests to providers; safe to share across worker threads.
pub struct Gateway {
    providers: RwLock<BTreeMap<String, Arc<dyn Provider>>>,
    sleeper: Arc<dyn Sleeper>,
    limiter: Limiter,
    jitter_seed: u64,
    sends: AtomicU64,
    attempts: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("providers", &self.providers.read().unwrap().keys().collect::<Vec<_>>())
            .field("max_in_flight", &self.limiter.capacity)
            .field("sends", &self.sends())
            .finish()
    }
}

pub const DEFAULT_CONCURRENCY: usize = 8;

impl Default for Gateway {
    fn default() -> Self {
        Self::new(DEFAULT_CONCURRENCY)
    }
}

impl Gateway {
    pub fn new(max_in_flight: usize) -> Self {
        Self {
            providers: RwLock::new(BTreeMap::new()),
            sleeper: Arc::new(ThreadSleeper),
            limiter: Limiter::new(max_in_flight),
            jitter_seed: 0,
            sends: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
        }
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_jitter_seed(mut self, seed: u64) -> Self {
        self.jitter_seed = seed;
        self
    }

    pub fn register_provider(&self, provider_id: &str, provider: Arc<dyn Provider>) -> Result<(), GatewayError> {
        let mut map = self.providers.write().unwrap_or_else(|e| e.into_inner());
        if map.contains_key(provider_id) {
            return Err(GatewayError::DuplicateProvider(provider_id.to_string()));
        }
        map.insert(provider_id.to_string(), provider);
        Ok(())
    }

    pub fn register_config(&self, config: &ProviderConfig, base_dir: &Path) -> Result<(), GatewayError> {
        self.register_provider(config.provider_id(), config.build(base_dir)?)
    }

    pub fn has_provider(&self, provider_id: &str) -> bool {
        self.providers.read().unwrap_or_else(|e| e.into_inner()).contains_key(provider_id)
    }

    /// Logical sends performed so far.
    pub fn sends(&self) -> u64 {
        self.sends.load(Ordering::SeqCst)
    }

    /// Provider attempts performed so far (sends plus retries).
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously in-flight sends observed.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.capacity
    }

    fn jitter_scale(&self, req_digest: &str, attempt: u32, j: f64) -> f64 {
        if j == 0.0 {
            return 1.0;
        }
        let prefix = u64::from_str_radix(&req_digest[..16.min(req_digest.len())], 16).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.jitter_seed ^ prefix ^ (attempt as u64).rotate_left(32));
        rng.gen_range((1.0 - j)..=(1.0 + j))
    }

    pub fn send(&self, req: &ProviderRequest, policy: &RetryPolicy) -> Result<ProviderResponse, GatewayError> {
        let provider = self
            .providers
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&req.provider_id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownProvider(req.provider_id.clone()))?;

        let _slot = self.limiter.acquire();
        self.sends.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let digest = if policy.jitter_fraction > 0.0 { req.digest() } else { String::new() };
        let mut errors = Vec::new();
        let mut backoff = Vec::new();
        let max_attempts = policy.max_attempts.max(1);

        for attempt in 0..max_attempts {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            match provider.call(req) {
                Ok(reply) => {
                    let usage = reply.usage.unwrap_or_else(|| TokenUsage {
                        input_tokens: req.approx_input_tokens(),
                        output_tokens: approx_tokens(&reply.body),
                        estimated: true,
                    });
                    return Ok(ProviderResponse {
                        body: reply.body,
                        usage,
                        latency: started.elapsed(),
                        attempts: attempt + 1,
                        from_cache: false,
                        backoff,
                    });
                }
                Err(e) if policy.retryable.contains(&e.class) => {
                    log::debug!("attempt {} for {} failed: {e}", attempt + 1, req.provider_id);
                    errors.push(e);
                    if attempt + 1 < max_attempts {
                        let scale = self.jitter_scale(&digest, attempt, policy.jitter_fraction);
                        let wait = policy.jittered_delay(attempt, scale);
                        self.sleeper.sleep(wait);
                        backoff.push(wait);
                    }
                }
                Err(e) if e.class == ErrorClass::Transport => return Err(GatewayError::Transport(e)),
                Err(e) => return Err(GatewayError::NonRetryable(e)),
            }
        }
        Err(GatewayError::ExhaustedRetries { errors })
    }
}
