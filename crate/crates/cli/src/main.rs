mod commands;
mod experiments;

use clap::{Args, Parser, Subcommand, ValueEnum};
use extractkit::cost::Money;
use extractkit::executor::{ExecError, RunConfig};
use extractkit::gateway::GatewayError;
use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "extractkit", version, about = "Schema-validated LLM extraction runs and experiments")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an extraction from scratch.
    Extract(ExtractArgs),
    /// Continue a halted or interrupted run.
    Resume(ResumeArgs),
    /// Score a finished run against reference labels.
    Evaluate(EvaluateArgs),
    /// Project the cost of a run without calling any provider.
    EstimateCost(ConfigArgs),
    /// Keyword cost/recall sweep.
    Pareto(ParetoArgs),
    /// Iterative prompt refinement against labelled chunks.
    Lilpro(LilproArgs),
    /// Inspect or maintain the response cache.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Write CSV (and optionally SVG) from sweep or trajectory artifacts.
    Export(ExportArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// Spending cap, e.g. 1.50.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    workspace: Option<String>,
}

impl Overrides {
    /// Applies the flags to `config` and returns them for the manifest.
    fn apply(&self, config: &mut RunConfig) -> Result<BTreeMap<String, String>, CliError> {
        let mut applied = BTreeMap::new();
        if let Some(b) = &self.budget {
            let money: Money = b.parse().map_err(|e| CliError::User(format!("--budget: {e}")))?;
            config.budget = Some(money);
            applied.insert("budget".into(), money.to_string());
        }
        if let Some(c) = self.concurrency {
            config.concurrency = c;
            applied.insert("concurrency".into(), c.to_string());
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
            applied.insert("batch_size".into(), b.to_string());
        }
        if let Some(r) = &self.run_id {
            config.run_id = Some(r.clone());
            applied.insert("run_id".into(), r.clone());
        }
        if let Some(w) = &self.workspace {
            let abs = std::path::absolute(w).map_err(|e| CliError::User(format!("--workspace: {e}")))?;
            config.workspace = abs.to_string_lossy().into_owned();
            applied.insert("workspace".into(), config.workspace.clone());
        }
        config.validate().map_err(|e| CliError::User(e.to_string()))?;
        Ok(applied)
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Load, split, filter and estimate cost only.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    /// Usually `<run dir>/config.snapshot`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MetricKind {
    Classification,
    Regression,
    Presence,
    Recall,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum KeyArg {
    Doc,
    Chunk,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    base: ConfigArgs,
    #[arg(long)]
    field: String,
    #[arg(long, value_enum)]
    metric: MetricKind,
    /// Positive class for classification metrics.
    #[arg(long)]
    positive: Option<String>,
    /// Whether labels are keyed by document or chunk id.
    #[arg(long, value_enum, default_value = "doc")]
    key: KeyArg,
    /// Labels file; defaults to the config's `labels`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ParetoArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Candidate keywords, one per line.
    #[arg(long)]
    keywords: PathBuf,
    /// Record field whose mentions are scored.
    #[arg(long)]
    field: String,
    /// Largest keyword set; defaults to all candidates.
    #[arg(long)]
    max_k: Option<usize>,
    /// Frontier CSV; the sweep is also saved next to it as JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SelectionArg {
    FinalPt,
    ArgmaxMt,
}

#[derive(Args, Debug)]
struct LilproArgs {
    #[command(flatten)]
    base: ConfigArgs,
    #[arg(long)]
    field: String,
    /// Starting prompt.
    #[arg(long)]
    p0: PathBuf,
    /// Optimizer template with {examples} and {prompt}; a built-in one is used if absent.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(short = 'B', long = "batch", default_value_t = 8)]
    batch: usize,
    #[arg(short = 'T', long = "batches", default_value_t = 20)]
    batches: usize,
    #[arg(short = 'k', long = "error-budget", default_value_t = 3)]
    error_budget: usize,
    /// Defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "final-pt")]
    selection: SelectionArg,
    /// Trajectory JSON lines; the chosen prompt goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// Keep this share of labelled items out of the loop and score p0 and
    /// the chosen prompt on them.
    #[arg(long)]
    holdout: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum CacheCommand {
    Stats {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dump entries as JSON lines.
    Export {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Delete entries created before a date (YYYY-MM-DD or RFC 3339).
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        before: String,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ExportKind {
    Frontier,
    Trajectory,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(value_enum)]
    kind: ExportKind,
    /// Sweep JSON or trajectory JSON lines.
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frontier plot; only for `frontier`.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
    /// Budget halt; the message says how to resume.
    Halt(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
            CliError::Halt(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) | CliError::Halt(m) => f.write_str(m),
        }
    }
}

impl From<ExecError> for CliError {
    fn from(e: ExecError) -> Self {
        let msg = e.to_string();
        match e {
            ExecError::Cache(_) | ExecError::Store(_) => CliError::Internal(msg),
            ExecError::Gateway(GatewayError::Config(_) | GatewayError::UnknownProvider(_)) => CliError::User(msg),
            ExecError::Gateway(_) => CliError::Internal(msg),
            _ => CliError::User(msg),
        }
    }
}

pub fn io_err(path: &std::path::Path, e: impl fmt::Display) -> CliError {
    CliError::User(format!("{}: {e}", path.display()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Extract(a) => commands::extract(&a.base.config, &a.base.overrides, a.dry_run),
        Command::Resume(a) => commands::resume(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::EstimateCost(a) => commands::estimate_cost(&a.config, &a.overrides),
        Command::Pareto(a) => experiments::pareto(&a),
        Command::Lilpro(a) => experiments::lilpro(&a),
        Command::Cache(c) => commands::cache(&c),
        Command::Export(a) => commands::export(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
