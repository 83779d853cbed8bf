use crate::commands::{executor, write_file};
use crate::{io_err, CliError, LilproArgs, ParetoArgs, SelectionArg};
use chrono::{DateTime, Utc};
use extractkit::cost::{CostLedger, LedgerSnapshot};
use extractkit::evaluation::{split_dataset, LabeledDataset};
use extractkit::executor::{ChunkOutcome, Engine, Executor, FailureDetail, RunConfig, EXTRACTOR_ROLE, OPTIMIZER_ROLE};
use extractkit::ingest::Chunk;
use extractkit::lilpro::{build_meta_prompt, held_out_score, run_lilpro, write_trajectory, LabeledItem, LilproConfig, LilproError, MetaPrompt, Selection};
use extractkit::par::Strategy;
use extractkit::pareto::{render_svg, sweep, ParetoError, PipelineEvaluator};
use extractkit::relevance::{MatchMode, RelevanceConfig};
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum ExperimentStatus {
    Running,
    Complete,
    Halted,
    Failed,
}

/// Provenance file for an experiment command, rewritten as it progresses.
#[derive(Debug, Serialize)]
struct ExperimentManifest {
    command: &'static str,
    status: ExperimentStatus,
    tool_version: &'static str,
    config_digest: String,
    arguments: BTreeMap<String, String>,
    overrides: BTreeMap<String, String>,
    ledger: LedgerSnapshot,
    started_at: DateTime<Utc>,
    updated_at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    config: RunConfig,
}

struct Tracker {
    path: PathBuf,
    manifest: ExperimentManifest,
}

impl Tracker {
    fn start(path: PathBuf, command: &'static str, exec: &Executor, arguments: BTreeMap<String, String>) -> Result<Self, CliError> {
        let now = Utc::now();
        let mut t = Self {
            path,
            manifest: ExperimentManifest {
                command,
                status: ExperimentStatus::Running,
                tool_version: env!("CARGO_PKG_VERSION"),
                config_digest: exec.digest().to_string(),
                arguments,
                overrides: exec.overrides().clone(),
                ledger: LedgerSnapshot::default(),
                started_at: now,
                updated_at: now,
                error: None,
                config: exec.config().clone(),
            },
        };
        t.save()?;
        Ok(t)
    }

    fn save(&mut self) -> Result<(), CliError> {
        self.manifest.updated_at = Utc::now();
        write_file(&self.path, serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes"))
    }

    /// Records the outcome and passes `result` through.
    fn finish<T>(mut self, ledger: &CostLedger, result: Result<T, CliError>) -> Result<T, CliError> {
        self.manifest.ledger = ledger.snapshot();
        self.manifest.status = match &result {
            Ok(_) => ExperimentStatus::Complete,
            Err(CliError::Halt(_)) => ExperimentStatus::Halted,
            Err(_) => ExperimentStatus::Failed,
        };
        self.manifest.error = result.as_ref().err().map(|e| e.to_string());
        self.save()?;
        result
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn labels_for(exec: &Executor, field: &str) -> Result<BTreeMap<String, Value>, CliError> {
    let path = exec
        .config()
        .labels
        .as_ref()
        .ok_or_else(|| CliError::User("the config needs a `labels` file for this command".into()))?;
    let refs = LabeledDataset::load(Path::new(path))
        .map_err(|e| CliError::User(e.to_string()))?
        .for_field(field);
    if refs.is_empty() {
        return Err(CliError::User(format!("{path} has no labels for field `{field}`")));
    }
    Ok(refs)
}

fn halt_message(ledger: &CostLedger) -> String {
    let snap = ledger.snapshot();
    let budget = snap.budget.map(|b| b.to_string()).unwrap_or_else(|| "none".into());
    format!(
        "budget reached after spending {} of {budget}; cached responses make a rerun with --budget <larger amount> cheap",
        snap.total_cost
    )
}

pub fn pareto(args: &ParetoArgs) -> Result<(), CliError> {
    let exec = executor(&args.base.config, &args.base.overrides)?;
    let text = fs::read_to_string(&args.keywords).map_err(|e| io_err(&args.keywords, e))?;
    let candidates: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect();
    let n = args.max_k.unwrap_or(candidates.len());
    let refs = labels_for(&exec, &args.field)?;
    let base = match exec.filter() {
        Some(f) => f.clone(),
        None => RelevanceConfig {
            keywords: candidates.clone(),
            mode: MatchMode::default(),
            cutoff: None,
            fuzzy_threshold: None,
        }
        .build()
        .map_err(|e| CliError::User(e.to_string()))?,
    };
    let chunks = exec.load_chunks()?;
    let config = exec.config();
    let ledger = CostLedger::new(config.budget);
    let arguments = BTreeMap::from([
        ("keywords".to_string(), args.keywords.display().to_string()),
        ("field".to_string(), args.field.clone()),
        ("max_k".to_string(), n.to_string()),
        ("out".to_string(), args.out.display().to_string()),
    ]);
    let tracker = Tracker::start(sibling(&args.out, "manifest.json"), "pareto", &exec, arguments)?;
    let result = (|| {
        let evaluator = PipelineEvaluator::new(
            exec.engine(),
            &ledger,
            base,
            &args.field,
            &chunks,
            &refs,
            config.train_fraction,
            config.cost_sample_size,
            config.seed,
            Strategy::with_workers(config.concurrency),
        )
        .map_err(pareto_err(&ledger))?;
        let frontier = sweep(&evaluator, &candidates, n, Strategy::Sequential).map_err(pareto_err(&ledger))?;
        write_file(&sibling(&args.out, "json"), serde_json::to_vec_pretty(&frontier).expect("frontier serializes"))?;
        write_file(&args.out, frontier.to_csv())?;
        if let Some(svg) = &args.svg {
            write_file(svg, render_svg(&frontier))?;
        }
        for p in &frontier.points {
            println!(
                "{:<2} keywords  train recall {:.4} cost {}  test recall {:.4} cost {}  [{}]",
                p.keyword_count,
                p.recall_train,
                p.cost_train,
                p.recall_test,
                p.cost_test,
                p.keywords.join(", ")
            );
        }
        println!("wrote {}", args.out.display());
        Ok(())
    })();
    tracker.finish(&ledger, result)
}

fn pareto_err(ledger: &CostLedger) -> impl Fn(ParetoError) -> CliError + '_ {
    move |e| match e {
        ParetoError::BudgetHalt => CliError::Halt(halt_message(ledger)),
        ParetoError::Eval(m) => CliError::Internal(m),
        other => CliError::User(other.to_string()),
    }
}

fn field_values(outcome: &ChunkOutcome, field: &str) -> Vec<Value> {
    match outcome {
        ChunkOutcome::Extracted { records } => {
            records.iter().filter_map(|r| r.values.get(field).cloned()).collect()
        }
        ChunkOutcome::Failed { .. } => Vec::new(),
    }
}

pub fn lilpro(args: &LilproArgs) -> Result<(), CliError> {
    let exec = executor(&args.base.config, &args.base.overrides)?;
    let config = exec.config().clone();
    let p0 = fs::read_to_string(&args.p0).map_err(|e| io_err(&args.p0, e))?;
    let meta = match &args.meta {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            MetaPrompt::parse(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?
        }
        None => MetaPrompt::default_template(),
    };
    let refs = labels_for(&exec, &args.field)?;
    let chunks: HashMap<String, Chunk> = exec.plan()?.kept.into_iter().map(|c| (c.chunk_id.clone(), c)).collect();
    let items: Vec<LabeledItem> = refs
        .iter()
        .filter_map(|(id, y)| {
            chunks.get(id).map(|c| LabeledItem {
                id: id.clone(),
                text: c.text.clone(),
                reference: y.clone(),
            })
        })
        .collect();
    if items.is_empty() {
        return Err(CliError::User("no labelled chunk ids match the corpus chunks".into()));
    }
    let seed = args.seed.unwrap_or(config.seed);
    let (items, held) = match args.holdout {
        None => (items, Vec::new()),
        Some(f) => split_dataset(&items, 1.0 - f, seed).map_err(|e| CliError::User(format!("--holdout: {e}")))?,
    };
    let engine = exec.engine();
    let optimizer = Engine::new(
        None,
        config.optimizer.clone().unwrap_or_else(|| config.provider.clone()),
        exec.pricing(),
        config.retry.clone(),
        Arc::clone(&engine.gateway),
        engine.cache.clone(),
    )?;
    let schema = exec.schema();
    let ledger = CostLedger::new(config.budget);
    let cfg = LilproConfig {
        selection: match args.selection {
            SelectionArg::FinalPt => Selection::FinalPt,
            SelectionArg::ArgmaxMt => Selection::ArgmaxMt,
        },
        workers: config.concurrency,
        ..LilproConfig::new(args.batch, args.batches, args.error_budget, seed)
    };
    let arguments = BTreeMap::from([
        ("field".to_string(), args.field.clone()),
        ("p0".to_string(), args.p0.display().to_string()),
        ("meta".to_string(), args.meta.as_ref().map(|m| m.display().to_string()).unwrap_or_else(|| "built-in".into())),
        ("batch_size".to_string(), cfg.batch_size.to_string()),
        ("batches".to_string(), cfg.batches.to_string()),
        ("error_budget".to_string(), cfg.error_budget.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("selection".to_string(), format!("{:?}", cfg.selection)),
        ("holdout".to_string(), args.holdout.map(|f| f.to_string()).unwrap_or_else(|| "none".into())),
    ]);
    let tracker = Tracker::start(sibling(&args.out, "manifest.json"), "lilpro", &exec, arguments)?;
    let extract = |prompt: &str, item: &LabeledItem| -> Result<Vec<Value>, LilproError> {
        let chunk = &chunks[&item.id];
        let text = format!("{prompt}\n\n{}", schema.render_text(&chunk.text)?);
        let call = engine
            .call(&engine.request(text), &ledger, EXTRACTOR_ROLE)
            .map_err(|e| LilproError::Extractor(e.to_string()))?
            .ok_or(LilproError::BudgetHalt)?;
        Ok(match &call.body {
            Ok(body) => field_values(&engine.validate(body, chunk), &args.field),
            Err(_) => Vec::new(),
        })
    };
    let optimize = |prompt: &str, curated: &[extractkit::lilpro::Triplet]| -> Result<String, LilproError> {
        let text = build_meta_prompt(&meta, prompt, curated, &args.field)?;
        let call = optimizer
            .call(&optimizer.request(text), &ledger, OPTIMIZER_ROLE)
            .map_err(|e| LilproError::Optimizer(e.to_string()))?
            .ok_or(LilproError::BudgetHalt)?;
        match call.body {
            Ok(body) => Ok(body),
            Err(FailureDetail::Provider { message, .. }) => Err(LilproError::Optimizer(message)),
            Err(other) => Err(LilproError::Optimizer(format!("{other:?}"))),
        }
    };
    let to_cli = |e: LilproError| match e {
        LilproError::BudgetHalt => CliError::Halt(halt_message(&ledger)),
        LilproError::Extractor(m) | LilproError::Optimizer(m) => CliError::Internal(m),
        other => CliError::User(other.to_string()),
    };
    let result = run_lilpro(&items, extract, optimize, p0.trim_end(), &cfg)
        .map_err(to_cli)
        .and_then(|run| {
            let mut buf = Vec::new();
            write_trajectory(&mut buf, &run.trajectory).expect("writing to memory");
            write_file(&args.out, buf)?;
            write_file(&sibling(&args.out, "prompt.txt"), format!("{}\n", run.prompt))?;
            for s in &run.trajectory {
                let presence = s.presence_precision.map(|p| format!("{p:.3}")).unwrap_or_else(|| "-".into());
                println!("batch {:<3} score {:.3}  presence {presence}  errors {}", s.batch, s.batch_score, s.error_count);
            }
            if !held.is_empty() {
                let strategy = Strategy::with_workers(cfg.workers);
                let score = |p: &str| held_out_score(&held, extract, p, cfg.tolerance, strategy).map_err(to_cli);
                let report = json!({
                    "items": held.len(),
                    "p0": score(p0.trim_end())?,
                    "chosen": score(&run.prompt)?,
                });
                println!("held-out ({} items): p0 {}  chosen {}", held.len(), report["p0"], report["chosen"]);
                write_file(&sibling(&args.out, "holdout.json"), serde_json::to_vec_pretty(&report).expect("report serializes"))?;
            }
            println!("wrote {}", args.out.display());
            Ok(())
        });
    tracker.finish(&ledger, result)
}
