use crate::{io_err, CacheCommand, CliError, EvaluateArgs, ExportArgs, ExportKind, KeyArg, MetricKind, Overrides, ResumeArgs};
use chrono::{DateTime, NaiveDate, Utc};
use extractkit::evaluation::{
    classification_metrics, first_predictions, group_values, presence_metric, recall_on_field, regression_metrics, IdKey,
    LabeledDataset,
};
use extractkit::executor::{open_cache, read_records, ExecOptions, Executor, RunConfig, RunResult, RunStatus, CONFIG_SNAPSHOT};
use extractkit::lilpro::{read_trajectory, trajectory_csv};
use extractkit::pareto::{render_svg, Frontier};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<(RunConfig, BTreeMap<String, String>), CliError> {
    let mut config = RunConfig::load(path).map_err(|e| CliError::User(e.to_string()))?;
    let applied = overrides.apply(&mut config)?;
    Ok((config, applied))
}

pub fn executor(path: &Path, overrides: &Overrides) -> Result<Executor, CliError> {
    let (config, applied) = load_config(path, overrides)?;
    Ok(Executor::new(config)?.with_overrides(applied))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn print_estimate(exec: &Executor) -> Result<(), CliError> {
    let plan = exec.plan()?;
    let est = exec.estimate(&plan)?;
    println!("model            {}/{}", est.provider_id, est.model_id);
    println!("chunks           {} total, {} kept, {} dropped", est.chunks_total, est.chunks_kept, plan.dropped);
    println!("already cached   {}", est.chunks_cached);
    println!("input tokens     {} (approx.)", est.input_tokens);
    println!("output cap       {}", est.max_output_tokens);
    println!("projected cost   {} (input only {})", est.projected_upper, est.projected_input_only);
    if let Some(b) = exec.config().budget {
        println!("budget           {b}");
    }
    Ok(())
}

fn report(exec: &Executor, result: RunResult) -> Result<(), CliError> {
    let ledger = &result.ledger;
    let summary = format!(
        "run {}: {} records, {} failures, {} kept / {} dropped chunks, cost {} ({} billed calls, {} cache hits)",
        result.run_id,
        result.records.len(),
        result.failures.len(),
        result.chunks_kept,
        result.chunks_dropped,
        ledger.total_cost,
        ledger.calls,
        ledger.calls_served_from_cache
    );
    match result.status {
        RunStatus::Complete => {
            println!("{summary}");
            println!("outputs in {}", result.run_dir.display());
            Ok(())
        }
        RunStatus::Halted | RunStatus::Interrupted | RunStatus::Running => {
            let budget = ledger.budget.map(|b| b.to_string()).unwrap_or_else(|| "none".into());
            let done = exec.checkpoint().load()?.map_or(0, |s| s.completed.len());
            Err(CliError::Halt(format!(
                "budget reached after spending {} of {budget}; {} of {} chunks done.\ncheckpoint: {}\nresume with: extractkit resume --config {} --budget <larger amount>",
                ledger.total_cost,
                done,
                result.chunks_kept,
                exec.checkpoint().path().display(),
                result.run_dir.join(CONFIG_SNAPSHOT).display()
            )))
        }
    }
}

pub fn extract(config: &Path, overrides: &Overrides, dry_run: bool) -> Result<(), CliError> {
    let exec = executor(config, overrides)?;
    if dry_run {
        return print_estimate(&exec);
    }
    let result = exec.run(&ExecOptions::default())?;
    report(&exec, result)
}

pub fn estimate_cost(config: &Path, overrides: &Overrides) -> Result<(), CliError> {
    print_estimate(&executor(config, overrides)?)
}

pub fn resume(args: &ResumeArgs) -> Result<(), CliError> {
    let overrides = Overrides {
        budget: args.budget.clone(),
        concurrency: args.concurrency,
        ..Overrides::default()
    };
    let exec = executor(&args.config, &overrides)?;
    let result = exec.resume(&ExecOptions::default())?;
    report(&exec, result)
}

fn parse_scalar(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let exec = executor(&args.base.config, &args.base.overrides)?;
    let labels_path = match (&args.labels, &exec.config().labels) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.into(),
        (None, None) => return Err(CliError::User("no labels: pass --labels or set `labels` in the config".into())),
    };
    let labels = LabeledDataset::load(&labels_path).map_err(|e| CliError::User(e.to_string()))?;
    let refs = labels.for_field(&args.field);
    if refs.is_empty() {
        return Err(CliError::User(format!("{} has no labels for field `{}`", labels_path.display(), args.field)));
    }
    let records = read_records(exec.run_dir())?;
    let key = match args.key {
        KeyArg::Doc => IdKey::Doc,
        KeyArg::Chunk => IdKey::Chunk,
    };
    let grouped = group_values(&records, &args.field, key);
    let user = |e: extractkit::evaluation::EvalError| CliError::User(e.to_string());
    let report = match args.metric {
        MetricKind::Presence => json!({ "presence": presence_metric(&grouped, &refs) }),
        MetricKind::Recall => json!({ "recall": recall_on_field(&grouped, &refs) }),
        MetricKind::Classification => {
            let positive = args
                .positive
                .as_deref()
                .map(parse_scalar)
                .ok_or_else(|| CliError::User("classification needs --positive".into()))?;
            let preds = first_predictions(&grouped, &refs);
            serde_json::to_value(classification_metrics(&preds, &refs, &positive).map_err(user)?).expect("report serializes")
        }
        MetricKind::Regression => {
            let preds = first_predictions(&grouped, &refs);
            serde_json::to_value(regression_metrics(&preds, &refs).map_err(user)?).expect("report serializes")
        }
    };
    println!("run {}  field {}  labelled ids {}", exec.run_id(), args.field, refs.len());
    if let Value::Object(map) = &report {
        for (name, v) in map {
            let shown = match v.get("value") {
                Some(x) => format!("{x}"),
                None if v.is_object() => format!("undefined ({})", v.get("reason").and_then(Value::as_str).unwrap_or("")),
                None => v.to_string(),
            };
            println!("{name:<16} {shown}");
        }
    }
    if let Some(path) = &args.json {
        write_file(path, serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    }
    Ok(())
}

fn parse_cutoff(s: &str) -> Result<DateTime<Utc>, CliError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc())
        .map_err(|_| CliError::User(format!("--before: expected YYYY-MM-DD or RFC 3339, got `{s}`")))
}

pub fn cache(cmd: &CacheCommand) -> Result<(), CliError> {
    let config_path = match cmd {
        CacheCommand::Stats { config } | CacheCommand::Export { config, .. } | CacheCommand::Prune { config, .. } => config,
    };
    let (config, _) = load_config(config_path, &Overrides::default())?;
    let cache = open_cache(&config)?.ok_or_else(|| CliError::User("cache is disabled in this config".into()))?;
    let internal = |e: extractkit::cache::CacheError| CliError::Internal(e.to_string());
    match cmd {
        CacheCommand::Stats { .. } => {
            let s = cache.stats().map_err(internal)?;
            println!("backend  {:?}", config.cache.backend);
            println!("entries  {}", s.entries);
            println!("bytes    {}", s.bytes);
        }
        CacheCommand::Export { out, .. } => {
            let n = match out {
                Some(path) => {
                    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
                    let n = cache.export(&mut f).map_err(internal)?;
                    f.flush().map_err(|e| io_err(path, e))?;
                    n
                }
                None => cache.export(&mut std::io::stdout().lock()).map_err(internal)?,
            };
            eprintln!("exported {n} entries");
        }
        CacheCommand::Prune { before, .. } => {
            let n = cache.prune_before(parse_cutoff(before)?).map_err(internal)?;
            println!("removed {n} entries");
        }
    }
    Ok(())
}

pub fn export(args: &ExportArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.from)
        .map_err(|e| CliError::User(format!("missing artifact {}: {e}", args.from.display())))?;
    match args.kind {
        ExportKind::Frontier => {
            let frontier: Frontier = serde_json::from_str(&text)
                .map_err(|e| CliError::User(format!("{} is not a sweep file: {e}", args.from.display())))?;
            write_file(&args.out, frontier.to_csv())?;
            if let Some(svg) = &args.svg {
                write_file(svg, render_svg(&frontier))?;
            }
        }
        ExportKind::Trajectory => {
            if args.svg.is_some() {
                return Err(CliError::User("--svg applies to frontier exports only".into()));
            }
            let trajectory = read_trajectory(&text)
                .map_err(|e| CliError::User(format!("{} is not a trajectory file: {e}", args.from.display())))?;
            write_file(&args.out, trajectory_csv(&trajectory))?;
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
