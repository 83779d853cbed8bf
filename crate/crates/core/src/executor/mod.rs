//! End-to-end extraction runs: load, split, filter, then per kept chunk
//! consult the cache, call the provider on a miss, validate, and
//! checkpoint after every batch.
//!
//! Run directory `<workspace>/runs/<run_id>/`:
//!
//! | file | contents |
//! |---|---|
//! | `config.snapshot` | resolved run config (YAML), re-runnable as is |
//! | `schema.snapshot` | schema file as read |
//! | `manifest.json` | provenance record, written before the first call |
//! | `audit.log` | one JSON line per provider interaction |
//! | `checkpoint/` | `state.json` and per-batch segments |
//! | `records.jsonl`, `failures.jsonl`, `ledger.json` | consolidated outputs |

mod checkpoint;
mod config;

pub use checkpoint::{CheckpointDir, CheckpointState};
pub use config::{CacheConfig, ConfigError, DataConfig, ModelConfig, RunConfig};

use crate::cache::{CacheEntry, CacheError, CacheKey, SemanticCache};
use crate::canonical::HASH_ALGORITHM;
use crate::cost::{cost_at, CostError, CostLedger, LedgerSnapshot, ModelPrice, Money, PricingTable, TokenUsage};
use crate::gateway::{ErrorClass, Gateway, GatewayError, ProviderRequest, RetryPolicy};
use crate::ingest::{load_documents, split_all, Chunk, IngestError};
use crate::par::{self, Strategy};
use crate::relevance::RelevanceFilter;
use crate::schema::{Coercion, ExtractionSchema, SchemaError, TemplateError, ValidatedRecord, ValidationFailure};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use thiserror::Error;

pub const EXTRACTOR_ROLE: &str = "extractor";
pub const OPTIMIZER_ROLE: &str = "optimizer";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("schema: {0}")]
    Schema(#[from] SchemaError),
    #[error("prompt template: {0}")]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("pricing: {0}")]
    Pricing(#[from] CostError),
    #[error("provider setup: {0}")]
    Gateway(GatewayError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("store: {0}")]
    Store(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("no checkpoint for run `{0}`")]
    MissingCheckpoint(String),
    #[error("config drift: checkpoint was written by config {checkpoint}, current config is {current}; refusing to resume")]
    DigestMismatch { checkpoint: String, current: String },
    #[error("run `{run_id}` is incomplete: {remaining} chunks not processed")]
    IncompleteRun { run_id: String, remaining: usize },
}

impl ExecError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        ExecError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureDetail {
    Validation {
        failure: ValidationFailure,
        raw_text: String,
    },
    Provider {
        class: Option<ErrorClass>,
        attempts: u32,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ChunkOutcome {
    /// Zero records is a valid extraction for list containers.
    Extracted { records: Vec<ValidatedRecord> },
    Failed { detail: FailureDetail },
}

/// What one kept chunk produced; one line of a checkpoint segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkResult {
    pub chunk_id: String,
    pub doc_id: String,
    #[serde(flatten)]
    pub outcome: ChunkOutcome,
}

/// One line of `failures.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub chunk_id: String,
    pub doc_id: String,
    pub detail: FailureDetail,
}

/// One line of `audit.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub chunk_id: String,
    pub role: String,
    pub request_digest: String,
    pub cache_hit: bool,
    pub attempts: u32,
    pub usage: Option<TokenUsage>,
    pub cost: Money,
    /// `records:<n>`, `validation_failure` or `provider_error`.
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Result of one logical call through cache and gateway.
#[derive(Debug, Clone, PartialEq)]
pub struct CallOutcome {
    pub request_digest: String,
    pub body: Result<String, FailureDetail>,
    /// Usage of the underlying provider call, also for cache hits.
    pub usage: Option<TokenUsage>,
    /// Billed cost: zero for cache hits and failed calls.
    pub cost: Money,
    pub cache_hit: bool,
    pub attempts: u32,
}

/// A chunk's extraction plus its audit line and gross usage.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub result: ChunkResult,
    pub audit: AuditEntry,
    pub usage: Option<TokenUsage>,
}

/// Cache-then-gateway call path shared by runs and experiment drivers.
pub struct Engine {
    pub schema: Option<Arc<ExtractionSchema>>,
    pub model: ModelConfig,
    pub price: ModelPrice,
    pub retry: RetryPolicy,
    pub coercion: Coercion,
    pub gateway: Arc<Gateway>,
    pub cache: Option<Arc<SemanticCache>>,
    response_schema: Option<Arc<Value>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("model", &self.model).finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(
        schema: Option<Arc<ExtractionSchema>>,
        model: ModelConfig,
        pricing: &PricingTable,
        retry: RetryPolicy,
        gateway: Arc<Gateway>,
        cache: Option<Arc<SemanticCache>>,
    ) -> Result<Self, ExecError> {
        let price = pricing.price(&model.provider_id, &model.model_id)?;
        if !gateway.has_provider(&model.provider_id) {
            return Err(ExecError::Gateway(GatewayError::UnknownProvider(model.provider_id.clone())));
        }
        let response_schema = schema.as_ref().map(|s| Arc::new(s.json_schema()));
        Ok(Self {
            schema,
            model,
            price,
            retry,
            coercion: Coercion::Strict,
            gateway,
            cache,
            response_schema,
        })
    }

    pub fn with_coercion(mut self, coercion: Coercion) -> Self {
        self.coercion = coercion;
        self
    }

    pub fn request(&self, user_prompt: String) -> ProviderRequest {
        ProviderRequest {
            provider_id: self.model.provider_id.clone(),
            model_id: self.model.model_id.clone(),
            system_prompt: self.schema.as_ref().map(|s| s.system_prompt.clone()).unwrap_or_default(),
            user_prompt,
            schema_digest: self.schema.as_ref().map(|s| s.digest().to_string()).unwrap_or_default(),
            params: self.model.params(),
            response_schema: self.response_schema.clone(),
        }
    }

    pub fn chunk_request(&self, chunk: &Chunk) -> Result<ProviderRequest, ExecError> {
        let schema = self.schema.as_ref().expect("chunk extraction needs a schema");
        Ok(self.request(schema.render_prompt(chunk)?))
    }

    /// Worst-case cost of `req`: approximate input plus the full output cap.
    pub fn estimate(&self, req: &ProviderRequest) -> Money {
        cost_at(
            &TokenUsage {
                input_tokens: req.approx_input_tokens(),
                output_tokens: req.params.max_output_tokens as u64,
                estimated: true,
            },
            self.price,
        )
    }

    /// Cache entry for `req`, if any.
    pub fn cached(&self, req: &ProviderRequest) -> Result<Option<CacheEntry>, ExecError> {
        match &self.cache {
            Some(c) => Ok(c.get(&CacheKey::for_request(req))?),
            None => Ok(None),
        }
    }

    /// `Ok(None)` means the budget refused the call.
    pub fn call(&self, req: &ProviderRequest, ledger: &CostLedger, role: &str) -> Result<Option<CallOutcome>, ExecError> {
        let key = CacheKey::for_request(req);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                ledger.record_cache_hit(role);
                return Ok(Some(CallOutcome {
                    request_digest: key.0,
                    body: Ok(hit.body),
                    usage: Some(hit.usage),
                    cost: Money::ZERO,
                    cache_hit: true,
                    attempts: 0,
                }));
            }
        }
        let Some(reservation) = ledger.reserve(self.estimate(req)) else {
            return Ok(None);
        };
        match self.gateway.send(req, &self.retry) {
            Ok(resp) => {
                let cost = cost_at(&resp.usage, self.price);
                ledger.settle(reservation, role, &resp.usage, cost);
                if let Some(cache) = &self.cache {
                    cache.put(&CacheEntry {
                        key: key.clone(),
                        body: resp.body.clone(),
                        usage: resp.usage,
                        created_at: Utc::now(),
                        schema_digest: req.schema_digest.clone(),
                    })?;
                }
                Ok(Some(CallOutcome {
                    request_digest: key.0,
                    body: Ok(resp.body),
                    usage: Some(resp.usage),
                    cost,
                    cache_hit: false,
                    attempts: resp.attempts,
                }))
            }
            Err(e @ (GatewayError::UnknownProvider(_) | GatewayError::Config(_) | GatewayError::DuplicateProvider(_))) => {
                ledger.release(reservation);
                Err(ExecError::Gateway(e))
            }
            Err(e) => {
                ledger.release(reservation);
                let class = match &e {
                    GatewayError::ExhaustedRetries { errors } => errors.last().map(|x| x.class),
                    GatewayError::NonRetryable(x) | GatewayError::Transport(x) => Some(x.class),
                    _ => None,
                };
                Ok(Some(CallOutcome {
                    request_digest: key.0,
                    body: Err(FailureDetail::Provider {
                        class,
                        attempts: e.attempts(),
                        message: e.to_string(),
                    }),
                    usage: None,
                    cost: Money::ZERO,
                    cache_hit: false,
                    attempts: e.attempts(),
                }))
            }
        }
    }

    /// Validated records for `body`, aligned to `chunk`.
    pub fn validate(&self, body: &str, chunk: &Chunk) -> ChunkOutcome {
        let schema = self.schema.as_ref().expect("validation needs a schema");
        match schema.validate_output(body, self.coercion) {
            Ok(records) => ChunkOutcome::Extracted {
                records: records.into_iter().map(|r| r.aligned(chunk)).collect(),
            },
            Err(failure) => ChunkOutcome::Failed {
                detail: FailureDetail::Validation {
                    failure,
                    raw_text: body.to_string(),
                },
            },
        }
    }

    /// Full per-chunk path. `Ok(None)` means the budget halted the call.
    pub fn extract_chunk(&self, chunk: &Chunk, ledger: &CostLedger, role: &str) -> Result<Option<Processed>, ExecError> {
        let req = self.chunk_request(chunk)?;
        let Some(call) = self.call(&req, ledger, role)? else {
            return Ok(None);
        };
        let (outcome, response) = match &call.body {
            Ok(body) => (self.validate(body, chunk), Some(body.clone())),
            Err(detail) => (ChunkOutcome::Failed { detail: detail.clone() }, None),
        };
        let (label, detail) = match &outcome {
            ChunkOutcome::Extracted { records } => (format!("records:{}", records.len()), None),
            ChunkOutcome::Failed { detail: FailureDetail::Validation { failure, .. } } => {
                ("validation_failure".to_string(), Some(failure.to_string()))
            }
            ChunkOutcome::Failed { detail: FailureDetail::Provider { message, .. } } => {
                ("provider_error".to_string(), Some(message.clone()))
            }
        };
        Ok(Some(Processed {
            audit: AuditEntry {
                chunk_id: chunk.chunk_id.clone(),
                role: role.to_string(),
                request_digest: call.request_digest,
                cache_hit: call.cache_hit,
                attempts: call.attempts,
                usage: call.usage,
                cost: call.cost,
                outcome: label,
                response,
                detail,
            },
            result: ChunkResult {
                chunk_id: chunk.chunk_id.clone(),
                doc_id: chunk.doc_id.clone(),
                outcome,
            },
            usage: call.usage,
        }))
    }
}

/// Loaded, split and filtered input of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub chunks: Vec<Chunk>,
    pub kept: Vec<Chunk>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub provider_id: String,
    pub model_id: String,
    pub chunks_total: usize,
    pub chunks_kept: usize,
    pub chunks_cached: usize,
    pub input_tokens: u64,
    pub max_output_tokens: u64,
    /// Uncached kept chunks at approximate input and full output cap.
    pub projected_upper: Money,
    /// Uncached kept chunks at approximate input only.
    pub projected_input_only: Money,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    /// Stopped by the budget; resumable.
    Halted,
    /// Stopped on request after some batches; resumable.
    Interrupted,
}

#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    /// Stop cleanly after this many batches in this invocation.
    pub stop_after_batches: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub records: Vec<ValidatedRecord>,
    pub failures: Vec<FailureRecord>,
    pub ledger: LedgerSnapshot,
    pub chunks_kept: usize,
    pub chunks_dropped: usize,
    /// Chunk ids handled in this invocation, in processing order.
    pub processed: Vec<String>,
    /// Gateway sends performed in this invocation.
    pub sends: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub status: RunStatus,
    pub tool_version: String,
    pub hash_algorithm: String,
    pub config_digest: String,
    pub schema_digest: String,
    pub seed: u64,
    pub provider: ModelConfig,
    pub system_prompt: String,
    pub prompt_template: String,
    pub data_source: String,
    pub overrides: BTreeMap<String, String>,
    pub chunks_total: usize,
    pub chunks_kept: usize,
    pub chunks_dropped: usize,
    pub chunks_completed: usize,
    pub ledger: LedgerSnapshot,
    pub checkpoint: String,
    pub resume_command: String,
    pub started_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub config: RunConfig,
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const LEDGER_FILE: &str = "ledger.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AUDIT_FILE: &str = "audit.log";
pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const SCHEMA_SNAPSHOT: &str = "schema.snapshot";

pub fn run_dir(workspace: &Path, run_id: &str) -> PathBuf {
    workspace.join("runs").join(run_id)
}

/// Builds the gateway a config describes.
pub fn gateway_for(config: &RunConfig) -> Result<Gateway, ExecError> {
    let gateway = Gateway::new(config.concurrency).with_jitter_seed(config.seed);
    register_providers(&gateway, config)?;
    Ok(gateway)
}

fn register_providers(gateway: &Gateway, config: &RunConfig) -> Result<(), ExecError> {
    for p in &config.providers {
        if !gateway.has_provider(p.provider_id()) {
            gateway
                .register_config(p, Path::new("."))
                .map_err(ExecError::Gateway)?;
        }
    }
    Ok(())
}

pub fn open_cache(config: &RunConfig) -> Result<Option<Arc<SemanticCache>>, ExecError> {
    if !config.cache.enabled {
        return Ok(None);
    }
    let dir = Path::new(&config.workspace).join("cache");
    Ok(Some(Arc::new(SemanticCache::open(&dir, config.cache.backend)?)))
}

fn read(path: &Path) -> Result<String, ExecError> {
    fs::read_to_string(path).map_err(|e| ExecError::io(path, e))
}

pub struct Executor {
    config: RunConfig,
    schema_text: String,
    pricing: PricingTable,
    engine: Engine,
    filter: Option<RelevanceFilter>,
    digest: String,
    run_id: String,
    run_dir: PathBuf,
    overrides: BTreeMap<String, String>,
}

impl Executor {
    /// Executor with the config's own gateway and cache.
    pub fn new(config: RunConfig) -> Result<Self, ExecError> {
        let gateway = Arc::new(gateway_for(&config)?);
        let cache = open_cache(&config)?;
        Self::with_parts(config, gateway, cache)
    }

    /// Executor over a caller-supplied gateway and cache. Providers listed
    /// in the config are registered unless the gateway already has them.
    pub fn with_parts(config: RunConfig, gateway: Arc<Gateway>, cache: Option<Arc<SemanticCache>>) -> Result<Self, ExecError> {
        config.validate()?;
        register_providers(&gateway, &config)?;
        let schema_text = read(Path::new(&config.schema))?;
        let schema = Arc::new(ExtractionSchema::load(&schema_text)?);
        let pricing = PricingTable::parse(&read(Path::new(&config.pricing))?)?;
        let filter = config
            .relevance
            .as_ref()
            .map(|r| r.build())
            .transpose()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let engine = Engine::new(Some(schema.clone()), config.provider.clone(), &pricing, config.retry.clone(), gateway, cache)?
            .with_coercion(config.validation);
        let digest = config.digest(schema.digest());
        let run_id = config.run_id(&digest);
        let run_dir = run_dir(Path::new(&config.workspace), &run_id);
        let mut config = config;
        config.run_id = Some(run_id.clone());
        Ok(Self {
            config,
            schema_text,
            pricing,
            engine,
            filter,
            digest,
            run_id,
            run_dir,
            overrides: BTreeMap::new(),
        })
    }

    /// Flag overrides to record in the manifest.
    pub fn with_overrides(mut self, overrides: BTreeMap<String, String>) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn overrides(&self) -> &BTreeMap<String, String> {
        &self.overrides
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn pricing(&self) -> &PricingTable {
        &self.pricing
    }

    pub fn schema(&self) -> &ExtractionSchema {
        self.engine.schema.as_ref().expect("executor has a schema")
    }

    pub fn filter(&self) -> Option<&RelevanceFilter> {
        self.filter.as_ref()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn checkpoint(&self) -> CheckpointDir {
        CheckpointDir::new(self.run_dir.join("checkpoint"))
    }

    /// All chunks of the configured corpus, before filtering.
    pub fn load_chunks(&self) -> Result<Vec<Chunk>, ExecError> {
        let d = &self.config.data;
        let docs = load_documents(Path::new(&d.source), d.format, d.text_column.as_deref(), d.id_column.as_deref())?;
        Ok(split_all(&docs, self.config.split)?)
    }

    pub fn plan(&self) -> Result<Plan, ExecError> {
        let chunks = self.load_chunks()?;
        let (kept, dropped) = match &self.filter {
            Some(f) => {
                let r = f.apply(&chunks);
                (r.kept, r.dropped_count)
            }
            None => (chunks.clone(), 0),
        };
        Ok(Plan { chunks, kept, dropped })
    }

    /// Dry-run projection; performs no provider sends.
    pub fn estimate(&self, plan: &Plan) -> Result<CostEstimate, ExecError> {
        let mut est = CostEstimate {
            provider_id: self.config.provider.provider_id.clone(),
            model_id: self.config.provider.model_id.clone(),
            chunks_total: plan.chunks.len(),
            chunks_kept: plan.kept.len(),
            chunks_cached: 0,
            input_tokens: 0,
            max_output_tokens: 0,
            projected_upper: Money::ZERO,
            projected_input_only: Money::ZERO,
        };
        for chunk in &plan.kept {
            let req = self.engine.chunk_request(chunk)?;
            if self.engine.cached(&req)?.is_some() {
                est.chunks_cached += 1;
                continue;
            }
            let input = req.approx_input_tokens();
            let output = req.params.max_output_tokens as u64;
            est.input_tokens += input;
            est.max_output_tokens += output;
            est.projected_upper += self.engine.estimate(&req);
            est.projected_input_only += cost_at(
                &TokenUsage { input_tokens: input, output_tokens: 0, estimated: true },
                self.engine.price,
            );
        }
        Ok(est)
    }

    /// Fresh run: discards any previous state of this run id.
    pub fn run(&self, opts: &ExecOptions) -> Result<RunResult, ExecError> {
        if self.run_dir.exists() {
            fs::remove_dir_all(&self.run_dir).map_err(|e| ExecError::io(&self.run_dir, e))?;
        }
        fs::create_dir_all(&self.run_dir).map_err(|e| ExecError::io(&self.run_dir, e))?;
        self.write_file(CONFIG_SNAPSHOT, self.config.to_yaml().as_bytes())?;
        self.write_file(SCHEMA_SNAPSHOT, self.schema_text.as_bytes())?;
        let state = CheckpointState::new(&self.run_id, &self.digest, Utc::now());
        self.checkpoint().save(&state)?;
        self.execute(state, opts)
    }

    /// Continues from the checkpoint, refusing if the config has drifted.
    pub fn resume(&self, opts: &ExecOptions) -> Result<RunResult, ExecError> {
        let state = self
            .checkpoint()
            .load()?
            .ok_or_else(|| ExecError::MissingCheckpoint(self.run_id.clone()))?;
        if state.config_digest != self.digest {
            return Err(ExecError::DigestMismatch {
                checkpoint: state.config_digest,
                current: self.digest.clone(),
            });
        }
        self.execute(state, opts)
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<(), ExecError> {
        let path = self.run_dir.join(name);
        checkpoint::write_atomic(&path, bytes).map_err(|e| ExecError::io(&path, e))
    }

    fn manifest(&self, status: RunStatus, plan: &Plan, state: &CheckpointState) -> Manifest {
        let schema = self.schema();
        Manifest {
            run_id: self.run_id.clone(),
            status,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            hash_algorithm: HASH_ALGORITHM.to_string(),
            config_digest: self.digest.clone(),
            schema_digest: schema.digest().to_string(),
            seed: self.config.seed,
            provider: self.config.provider.clone(),
            system_prompt: schema.system_prompt.clone(),
            prompt_template: schema.prompt_template.clone(),
            data_source: self.config.data.source.clone(),
            overrides: self.overrides.clone(),
            chunks_total: plan.chunks.len(),
            chunks_kept: plan.kept.len(),
            chunks_dropped: plan.dropped,
            chunks_completed: state.completed.len(),
            ledger: state.ledger.clone(),
            checkpoint: self.checkpoint().path().display().to_string(),
            resume_command: format!(
                "extractkit resume --config {}",
                self.run_dir.join(CONFIG_SNAPSHOT).display()
            ),
            started_at: state.started_at,
            updated_at: Utc::now(),
            config: self.config.clone(),
        }
    }

    fn write_manifest(&self, manifest: &Manifest) -> Result<(), ExecError> {
        self.write_file(MANIFEST_FILE, &serde_json::to_vec_pretty(manifest).expect("manifest serializes"))
    }

    fn append_audit(&self, entries: &[AuditEntry]) -> Result<u64, ExecError> {
        let path = self.run_dir.join(AUDIT_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ExecError::io(&path, e))?;
        let mut buf = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut buf, e).expect("audit entry serializes");
            buf.push(b'\n');
        }
        f.write_all(&buf).and_then(|_| f.sync_data()).map_err(|e| ExecError::io(&path, e))?;
        Ok(f.metadata().map_err(|e| ExecError::io(&path, e))?.len())
    }

    fn truncate_audit(&self, len: u64) -> Result<(), ExecError> {
        let path = self.run_dir.join(AUDIT_FILE);
        let f = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| ExecError::io(&path, e))?;
        f.set_len(len).map_err(|e| ExecError::io(&path, e))
    }

    fn execute(&self, mut state: CheckpointState, opts: &ExecOptions) -> Result<RunResult, ExecError> {
        let plan = self.plan()?;
        self.truncate_audit(state.audit_len)?;
        self.write_manifest(&self.manifest(RunStatus::Running, &plan, &state))?;

        let ledger = CostLedger::from_snapshot(state.ledger.clone());
        ledger.set_budget(self.config.budget);
        let remaining: Vec<&Chunk> = plan.kept.iter().filter(|c| !state.completed.contains(&c.chunk_id)).collect();
        let sends_before = self.engine.gateway.sends();
        let strategy = Strategy::with_workers(self.config.concurrency);
        let checkpoint = self.checkpoint();
        let mut processed = Vec::new();

        for (n, batch) in remaining.chunks(self.config.batch_size).enumerate() {
            if opts.stop_after_batches == Some(n) {
                return self.stop(RunStatus::Interrupted, &plan, &state, processed, sends_before);
            }
            let halted = AtomicBool::new(false);
            let outcomes = par::map_ordered(batch, strategy, |chunk| {
                if halted.load(Ordering::SeqCst) {
                    return Ok(None);
                }
                let r = self.engine.extract_chunk(chunk, &ledger, EXTRACTOR_ROLE);
                if matches!(r, Ok(None)) {
                    halted.store(true, Ordering::SeqCst);
                }
                r
            });
            let mut done = Vec::new();
            let mut fatal = None;
            for o in outcomes {
                match o {
                    Ok(Some(p)) => done.push(p),
                    Ok(None) => {}
                    Err(e) => {
                        fatal.get_or_insert(e);
                    }
                }
            }
            // Completed work is checkpointed even when the batch stops early.
            let results: Vec<ChunkResult> = done.iter().map(|p| p.result.clone()).collect();
            let audits: Vec<AuditEntry> = done.iter().map(|p| p.audit.clone()).collect();
            if !results.is_empty() {
                checkpoint.write_segment(state.segments, &results)?;
                state.segments += 1;
            }
            state.audit_len = self.append_audit(&audits)?;
            state.completed.extend(results.iter().map(|r| r.chunk_id.clone()));
            state.batch_cursor += 1;
            state.ledger = ledger.snapshot();
            checkpoint.save(&state)?;
            processed.extend(results.into_iter().map(|r| r.chunk_id));
            if let Some(e) = fatal {
                self.write_manifest(&self.manifest(RunStatus::Interrupted, &plan, &state))?;
                return Err(e);
            }
            if halted.load(Ordering::SeqCst) {
                log::warn!("budget reached; run `{}` halted after {} chunks", self.run_id, state.completed.len());
                return self.stop(RunStatus::Halted, &plan, &state, processed, sends_before);
            }
        }
        let mut result = self.consolidate_with(&plan, &state)?;
        result.processed = processed;
        result.sends = self.engine.gateway.sends() - sends_before;
        Ok(result)
    }

    fn stop(
        &self,
        status: RunStatus,
        plan: &Plan,
        state: &CheckpointState,
        processed: Vec<String>,
        sends_before: u64,
    ) -> Result<RunResult, ExecError> {
        self.write_manifest(&self.manifest(status, plan, state))?;
        let (records, failures) = self.collect(state)?;
        Ok(RunResult {
            run_id: self.run_id.clone(),
            run_dir: self.run_dir.clone(),
            status,
            records,
            failures,
            ledger: state.ledger.clone(),
            chunks_kept: plan.kept.len(),
            chunks_dropped: plan.dropped,
            processed,
            sends: self.engine.gateway.sends() - sends_before,
        })
    }

    fn collect(&self, state: &CheckpointState) -> Result<(Vec<ValidatedRecord>, Vec<FailureRecord>), ExecError> {
        let mut results = self.checkpoint().read_segments(state.segments)?;
        results.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for r in results {
            match r.outcome {
                ChunkOutcome::Extracted { records: rs } => records.extend(rs),
                ChunkOutcome::Failed { detail } => failures.push(FailureRecord {
                    chunk_id: r.chunk_id,
                    doc_id: r.doc_id,
                    detail,
                }),
            }
        }
        Ok((records, failures))
    }

    /// Writes the consolidated outputs of a complete run.
    pub fn consolidate(&self) -> Result<RunResult, ExecError> {
        let state = self
            .checkpoint()
            .load()?
            .ok_or_else(|| ExecError::MissingCheckpoint(self.run_id.clone()))?;
        self.consolidate_with(&self.plan()?, &state)
    }

    fn consolidate_with(&self, plan: &Plan, state: &CheckpointState) -> Result<RunResult, ExecError> {
        let remaining = plan.kept.iter().filter(|c| !state.completed.contains(&c.chunk_id)).count();
        if remaining > 0 {
            return Err(ExecError::IncompleteRun {
                run_id: self.run_id.clone(),
                remaining,
            });
        }
        let (records, failures) = self.collect(state)?;
        self.write_file(RECORDS_FILE, &jsonl(&records))?;
        self.write_file(FAILURES_FILE, &jsonl(&failures))?;
        self.write_file(
            LEDGER_FILE,
            &serde_json::to_vec_pretty(&state.ledger).expect("ledger serializes"),
        )?;
        self.write_manifest(&self.manifest(RunStatus::Complete, plan, state))?;
        Ok(RunResult {
            run_id: self.run_id.clone(),
            run_dir: self.run_dir.clone(),
            status: RunStatus::Complete,
            records,
            failures,
            ledger: state.ledger.clone(),
            chunks_kept: plan.kept.len(),
            chunks_dropped: plan.dropped,
            processed: Vec::new(),
            sends: 0,
        })
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("item serializes");
        buf.push(b'\n');
    }
    buf
}

/// Reads `audit.log` of a run directory.
pub fn read_audit(run_dir: &Path) -> Result<Vec<AuditEntry>, ExecError> {
    let path = run_dir.join(AUDIT_FILE);
    read(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ExecError::Store(format!("{}: {e}", path.display()))))
        .collect()
}

/// Reads `records.jsonl` of a run directory.
pub fn read_records(run_dir: &Path) -> Result<Vec<ValidatedRecord>, ExecError> {
    let path = run_dir.join(RECORDS_FILE);
    read(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ExecError::Store(format!("{}: {e}", path.display()))))
        .collect()
}

/// Chunk ids covered by a result set.
pub fn covered_chunks(result: &RunResult) -> BTreeSet<String> {
    result
        .records
        .iter()
        .map(|r| r.chunk_id.clone())
        .chain(result.failures.iter().map(|f| f.chunk_id.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockProvider, MockScript, ProviderError, RecordingSleeper};

    const SCHEMA: &str = r#"
name: goods
container: list-of-records
system_prompt: Extract commodities.
prompt_template: "Fields:\n{field_docs}\n---\n{chunk_text}"
fields:
  - {name: good, kind: string, description: commodity name}
"#;

    const MOCK: &str = r#"
mode: collect
on_miss: empty
empty_body: "[]"
match_after: "\n---\n"
rules:
  - {pattern: '(?i)\boil\b', body: '{"good": "oil"}'}
  - {pattern: '(?i)\bgas\b', body: '{"good": "gas"}'}
  - {pattern: 'BROKEN', body: '{"good": 5}'}
"#;

    struct Fixture {
        dir: tempfile::TempDir,
    }

    impl Fixture {
        /// 10 documents with 2 paragraphs each; 6 paragraphs mention a good.
        fn new() -> Self {
            let dir = tempfile::tempdir().unwrap();
            let corpus = dir.path().join("corpus");
            fs::create_dir_all(&corpus).unwrap();
            for d in 0..10 {
                let first = match d {
                    0..=2 => "Crude oil demand rose",
                    3 | 4 => "Natural gas storage fell",
                    5 => "BROKEN oil sentence",
                    _ => "Headcount was flat",
                };
                let text = format!("{first} in region {d}.\n\nNothing else to report for region {d}.\n");
                fs::write(corpus.join(format!("doc{d}.txt")), text).unwrap();
            }
            fs::write(dir.path().join("schema.yaml"), SCHEMA).unwrap();
            fs::write(dir.path().join("mock.yaml"), MOCK).unwrap();
            fs::write(dir.path().join("pricing.yaml"), "mock: {m1: {input_per_1m: '1.00', output_per_1m: '2.00'}}\n").unwrap();
            Self { dir }
        }

        fn config(&self, extra: &str) -> RunConfig {
            let base = "data: {source: corpus, format: txt}\nschema: schema.yaml\npricing: pricing.yaml\nprovider: {provider_id: mock, model_id: m1, max_output_tokens: 64}\nproviders: [{kind: mock, provider_id: mock, script: mock.yaml}]\nbatch_size: 4\nconcurrency: 3\nrelevance: {keywords: [oil, gas]}\n";
            let mut merged: serde_yaml::Mapping = serde_yaml::from_str(base).unwrap();
            if !extra.is_empty() {
                let overrides: serde_yaml::Mapping = serde_yaml::from_str(extra).unwrap();
                merged.extend(overrides);
            }
            RunConfig::parse(&serde_yaml::to_string(&merged).unwrap()).unwrap().resolved(self.dir.path())
        }
    }

    #[test]
    fn filtered_run_covers_exactly_the_kept_chunks() {
        let fx = Fixture::new();
        let ex = Executor::new(fx.config("")).unwrap();
        let r = ex.run(&ExecOptions::default()).unwrap();
        assert_eq!(r.status, RunStatus::Complete);
        assert_eq!((r.chunks_kept, r.chunks_dropped), (6, 14));
        assert_eq!(r.sends, 6);
        assert_eq!(r.records.len() + r.failures.len(), 6);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(covered_chunks(&r).len(), 6);
        for f in [RECORDS_FILE, FAILURES_FILE, LEDGER_FILE, MANIFEST_FILE, AUDIT_FILE, CONFIG_SNAPSHOT, SCHEMA_SNAPSHOT] {
            assert!(r.run_dir.join(f).exists(), "{f}");
        }
        assert!(ex.engine().gateway.peak_in_flight() <= 3);
    }

    #[test]
    fn warm_rerun_sends_nothing() {
        let fx = Fixture::new();
        let first = Executor::new(fx.config("")).unwrap().run(&ExecOptions::default()).unwrap();
        let bytes = fs::read(first.run_dir.join(RECORDS_FILE)).unwrap();
        let second = Executor::new(fx.config("")).unwrap().run(&ExecOptions::default()).unwrap();
        assert_eq!(second.sends, 0);
        assert_eq!(second.ledger.calls_served_from_cache, 6);
        assert_eq!(fs::read(second.run_dir.join(RECORDS_FILE)).unwrap(), bytes);
    }

    #[test]
    fn interrupt_then_resume_processes_the_rest_once() {
        let fx = Fixture::new();
        let cfg = fx.config("batch_size: 2\ncache: {enabled: false}\n");
        let ex = Executor::new(cfg.clone()).unwrap();
        let part = ex.run(&ExecOptions { stop_after_batches: Some(2) }).unwrap();
        assert_eq!(part.status, RunStatus::Interrupted);
        assert_eq!(part.processed.len(), 4);
        assert!(matches!(ex.consolidate(), Err(ExecError::IncompleteRun { remaining: 2, .. })));
        let rest = Executor::new(cfg.clone()).unwrap().resume(&ExecOptions::default()).unwrap();
        assert_eq!(rest.status, RunStatus::Complete);
        assert_eq!(rest.processed.len(), 2);
        assert!(rest.processed.iter().all(|c| !part.processed.contains(c)));
        let again = Executor::new(cfg).unwrap().resume(&ExecOptions::default()).unwrap();
        assert_eq!((again.sends, again.processed.len()), (0, 0));
        assert_eq!(again.records, rest.records);
    }

    #[test]
    fn consolidation_is_idempotent() {
        let fx = Fixture::new();
        let ex = Executor::new(fx.config("")).unwrap();
        let r = ex.run(&ExecOptions::default()).unwrap();
        let snap = |name: &str| fs::read(r.run_dir.join(name)).unwrap();
        let before = (snap(RECORDS_FILE), snap(FAILURES_FILE), snap(LEDGER_FILE));
        ex.consolidate().unwrap();
        assert_eq!(before, (snap(RECORDS_FILE), snap(FAILURES_FILE), snap(LEDGER_FILE)));
    }

    #[test]
    fn drifted_config_refuses_to_resume() {
        let fx = Fixture::new();
        let ex = Executor::new(fx.config("")).unwrap();
        ex.run(&ExecOptions { stop_after_batches: Some(1) }).unwrap();
        let cfg = RunConfig::load(&ex.run_dir().join(CONFIG_SNAPSHOT)).unwrap();
        assert_eq!(cfg.run_id.as_deref(), Some(ex.run_id()));
        let edited = SCHEMA.replace("Extract commodities.", "Extract commodities carefully.");
        fs::write(fx.dir.path().join("schema.yaml"), edited).unwrap();
        let r = Executor::new(cfg).unwrap().resume(&ExecOptions::default());
        assert!(matches!(r, Err(ExecError::DigestMismatch { .. })), "{r:?}");
    }

    #[test]
    fn budget_halt_is_resumable_with_a_raised_budget() {
        let fx = Fixture::new();
        let cfg = fx.config("budget: '0.000100'\ncache: {enabled: false}\n");
        let r = Executor::new(cfg.clone()).unwrap().run(&ExecOptions::default()).unwrap();
        assert_eq!(r.status, RunStatus::Halted);
        assert!(r.ledger.total_cost <= "0.000100".parse().unwrap());
        let mut raised = cfg;
        raised.budget = Some("1".parse().unwrap());
        let done = Executor::new(raised).unwrap().resume(&ExecOptions::default()).unwrap();
        assert_eq!(done.status, RunStatus::Complete);
        assert_eq!(done.records.len() + done.failures.len(), 6);
        let audit = read_audit(&done.run_dir).unwrap();
        assert_eq!(audit.len(), 6);
        assert_eq!(audit.iter().map(|a| a.cost).sum::<Money>(), done.ledger.total_cost);
    }

    #[test]
    fn provider_failures_are_recorded_not_fatal() {
        let fx = Fixture::new();
        let cfg = fx.config("cache: {enabled: false}\nretry: {max_attempts: 2, base_delay_ms: 1}\n");
        let mock = MockProvider::new(MockScript::parse(MOCK).unwrap()).unwrap();
        mock.inject_faults([ProviderError::status(401, "bad key")]);
        let gw = Arc::new(Gateway::new(1).with_sleeper(Arc::new(RecordingSleeper::default())));
        gw.register_provider("mock", Arc::new(mock)).unwrap();
        let r = Executor::with_parts(cfg, gw, None).unwrap().run(&ExecOptions::default()).unwrap();
        assert_eq!(r.status, RunStatus::Complete);
        let provider_failures = r
            .failures
            .iter()
            .filter(|f| matches!(f.detail, FailureDetail::Provider { .. }))
            .count();
        assert_eq!(provider_failures, 1);
    }

    #[test]
    fn dry_run_estimate_sends_nothing() {
        let fx = Fixture::new();
        let ex = Executor::new(fx.config("")).unwrap();
        let plan = ex.plan().unwrap();
        let est = ex.estimate(&plan).unwrap();
        assert_eq!(ex.engine().gateway.sends(), 0);
        assert_eq!((est.chunks_kept, est.chunks_cached), (6, 0));
        assert_eq!(est.max_output_tokens, 6 * 64);
        assert!(est.projected_upper > est.projected_input_only);
    }
}
