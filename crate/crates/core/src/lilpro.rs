//! Prompt refinement with a second model in the loop.
//!
//! Each round scores the current prompt on a sampled batch, picks a few of
//! the misses and asks an optimizer to rewrite the prompt from them. A round
//! without misses keeps the prompt unchanged.

use crate::evaluation::presence_metric;
use crate::par::{self, Strategy};
use crate::schema::{check_placeholders, fill_placeholders, TemplateError};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use thiserror::Error;

pub const DEFAULT_META_PROMPT: &str = include_str!("../templates/meta_prompt.txt");

/// Longest input excerpt shown to the optimizer, in characters.
pub const EXCERPT_CHARS: usize = 1200;

#[derive(Debug, Error)]
pub enum LilproError {
    #[error("dataset has {items} items, fewer than the batch size {batch_size}")]
    DatasetTooSmall { items: usize, batch_size: usize },
    #[error("invalid settings: {0}")]
    Config(String),
    #[error("cannot compare reference {reference} with prediction {prediction}")]
    TypeMismatch { reference: Value, prediction: Value },
    #[error("optimizer returned an empty prompt at batch {batch}")]
    OptimizerFailure { batch: usize },
    #[error("extractor failed: {0}")]
    Extractor(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("budget reached")]
    BudgetHalt,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub id: String,
    pub text: String,
    pub reference: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The prompt after the last batch.
    #[default]
    FinalPt,
    /// The prompt with the best batch score, earliest on ties.
    ArgmaxMt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LilproConfig {
    pub batch_size: usize,
    pub batches: usize,
    pub error_budget: usize,
    pub seed: u64,
    #[serde(default)]
    pub selection: Selection,
    /// Absolute tolerance for numeric matches.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Concurrent extractor calls within a batch.
    #[serde(default = "one")]
    pub workers: usize,
}

fn default_tolerance() -> f64 {
    1e-3
}

fn one() -> usize {
    1
}

impl LilproConfig {
    pub fn new(batch_size: usize, batches: usize, error_budget: usize, seed: u64) -> Self {
        Self {
            batch_size,
            batches,
            error_budget,
            seed,
            selection: Selection::default(),
            tolerance: default_tolerance(),
            workers: 1,
        }
    }

    fn validate(&self) -> Result<(), LilproError> {
        if self.batch_size == 0 || self.batches == 0 {
            return Err(LilproError::Config("batch size and batch count must be at least 1".into()));
        }
        if self.error_budget == 0 {
            return Err(LilproError::Config("error budget must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(LilproError::Config(format!("tolerance must be non-negative, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// A missed item as shown to the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub input: String,
    pub reference: Value,
    pub prediction: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    /// 1-based batch index.
    pub batch: usize,
    /// Prompt that was scored on this batch.
    pub prompt: String,
    pub batch_score: f64,
    pub error_count: usize,
    pub curated: Vec<Triplet>,
    /// Share of batch items whose reference appears among all extracted values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence_precision: Option<f64>,
    pub batch_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LilproRun {
    pub prompt: String,
    pub trajectory: Vec<PromptState>,
}

/// 1 when the prediction matches the reference, else 0. Booleans and strings
/// must match exactly (strings case-folded), numbers within `tolerance`. A
/// null prediction means nothing was extracted and scores 0.
pub fn match_score(reference: &Value, prediction: &Value, tolerance: f64) -> Result<u8, LilproError> {
    let hit = match (reference, prediction) {
        (_, Value::Null) => false,
        (Value::Bool(a), Value::Bool(b)) => a == b,
        (Value::String(a), Value::String(b)) => a.to_lowercase() == b.to_lowercase(),
        (Value::Number(a), Value::Number(b)) => match (a.as_f64(), b.as_f64()) {
            (Some(a), Some(b)) => (a - b).abs() <= tolerance,
            _ => false,
        },
        _ => {
            return Err(LilproError::TypeMismatch {
                reference: reference.clone(),
                prediction: prediction.clone(),
            })
        }
    };
    Ok(hit as u8)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPrompt {
    template: String,
}

impl MetaPrompt {
    const KNOWN: [&'static str; 3] = ["examples", "prompt", "field"];

    pub fn parse(template: &str) -> Result<Self, TemplateError> {
        check_placeholders(template, &Self::KNOWN, &["examples", "prompt"])?;
        Ok(Self { template: template.to_string() })
    }

    pub fn default_template() -> Self {
        Self::parse(DEFAULT_META_PROMPT).expect("bundled template is valid")
    }

    pub fn text(&self) -> &str {
        &self.template
    }
}

fn excerpt(text: &str) -> String {
    match text.char_indices().nth(EXCERPT_CHARS) {
        Some((cut, _)) => format!("{} [...]", &text[..cut]),
        None => text.to_string(),
    }
}

pub fn render_examples(triplets: &[Triplet]) -> String {
    triplets
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "Example {}:\nInput:\n{}\nExpected: {}\nPredicted: {}",
                i + 1,
                excerpt(&c.input),
                c.reference,
                c.prediction
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_meta_prompt(meta: &MetaPrompt, prompt: &str, triplets: &[Triplet], field: &str) -> Result<String, TemplateError> {
    let examples = render_examples(triplets);
    fill_placeholders(&meta.template, |name| match name {
        "examples" => Some(examples.clone()),
        "prompt" => Some(prompt.to_string()),
        "field" => Some(field.to_string()),
        _ => None,
    })
}

/// Draws batches without repeats inside a batch. Across batches, indices come
/// from a shuffled pool until it runs out, then the pool is reshuffled.
struct BatchSampler {
    n: usize,
    pool: Vec<usize>,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self { n, pool: Vec::new() }
    }

    fn draw(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch: Vec<usize> = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pool.is_empty() {
                let taken: BTreeSet<usize> = batch.iter().copied().collect();
                self.pool = (0..self.n).filter(|i| !taken.contains(i)).collect();
                self.pool.shuffle(rng);
                self.pool.reverse();
            }
            batch.push(self.pool.pop().expect("pool refilled"));
        }
        batch
    }
}

/// Runs `cfg.batches` rounds. `extract(prompt, item)` returns every value
/// extracted for the target field (the first counts as the prediction);
/// `optimize(prompt, curated)` returns the rewritten prompt.
pub fn run_lilpro<E, O>(items: &[LabeledItem], extract: E, mut optimize: O, p0: &str, cfg: &LilproConfig) -> Result<LilproRun, LilproError>
where
    E: Fn(&str, &LabeledItem) -> Result<Vec<Value>, LilproError> + Sync + Send,
    O: FnMut(&str, &[Triplet]) -> Result<String, LilproError>,
{
    cfg.validate()?;
    if items.len() < cfg.batch_size {
        return Err(LilproError::DatasetTooSmall {
            items: items.len(),
            batch_size: cfg.batch_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(items.len());
    let strategy = Strategy::with_workers(cfg.workers);
    let mut prompt = p0.to_string();
    let mut trajectory = Vec::with_capacity(cfg.batches);
    for t in 1..=cfg.batches {
        let batch: Vec<&LabeledItem> = sampler.draw(cfg.batch_size, &mut rng).into_iter().map(|i| &items[i]).collect();
        let outputs = par::map_ordered(&batch, strategy, |item| extract(&prompt, item));
        let mut errors = Vec::new();
        let mut hits = 0usize;
        let mut extracted: BTreeMap<String, Vec<Value>> = BTreeMap::new();
        let mut refs: BTreeMap<String, Value> = BTreeMap::new();
        for (item, out) in batch.iter().zip(outputs) {
            let values = out?;
            let prediction = values.first().cloned().unwrap_or(Value::Null);
            if match_score(&item.reference, &prediction, cfg.tolerance)? == 1 {
                hits += 1;
            } else {
                errors.push(Triplet {
                    id: item.id.clone(),
                    input: item.text.clone(),
                    reference: item.reference.clone(),
                    prediction,
                });
            }
            extracted.entry(item.id.clone()).or_default().extend(values);
            refs.insert(item.id.clone(), item.reference.clone());
        }
        let keep = cfg.error_budget.min(errors.len());
        let mut picked = index::sample(&mut rng, errors.len(), keep).into_vec();
        picked.sort_unstable();
        let curated: Vec<Triplet> = picked.into_iter().map(|i| errors[i].clone()).collect();
        let state = PromptState {
            batch: t,
            prompt: prompt.clone(),
            batch_score: hits as f64 / batch.len() as f64,
            error_count: errors.len(),
            curated,
            presence_precision: presence_metric(&extracted, &refs).value,
            batch_ids: batch.iter().map(|i| i.id.clone()).collect(),
        };
        if !state.curated.is_empty() {
            let next = optimize(&prompt, &state.curated)?;
            let next = next.trim();
            if next.is_empty() {
                return Err(LilproError::OptimizerFailure { batch: t });
            }
            prompt = next.to_string();
        }
        trajectory.push(state);
    }
    let chosen = match cfg.selection {
        Selection::FinalPt => prompt,
        Selection::ArgmaxMt => {
            let mut best = &trajectory[0];
            for s in &trajectory[1..] {
                if s.batch_score > best.batch_score {
                    best = s;
                }
            }
            best.prompt.clone()
        }
    };
    Ok(LilproRun { prompt: chosen, trajectory })
}

/// Mean correctness of one prompt over items the loop did not sample from.
/// `None` for an empty set.
pub fn held_out_score<E>(items: &[LabeledItem], extract: E, prompt: &str, tolerance: f64, strategy: Strategy) -> Result<Option<f64>, LilproError>
where
    E: Fn(&str, &LabeledItem) -> Result<Vec<Value>, LilproError> + Sync + Send,
{
    if items.is_empty() {
        return Ok(None);
    }
    let outputs = par::map_ordered(items, strategy, |item| extract(prompt, item));
    let mut hits = 0usize;
    for (item, out) in items.iter().zip(outputs) {
        let prediction = out?.into_iter().next().unwrap_or(Value::Null);
        hits += match_score(&item.reference, &prediction, tolerance)? as usize;
    }
    Ok(Some(hits as f64 / items.len() as f64))
}

pub fn write_trajectory(out: &mut dyn Write, trajectory: &[PromptState]) -> std::io::Result<()> {
    for s in trajectory {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectory(text: &str) -> Result<Vec<PromptState>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Columns `batch,batch_score,presence_precision,error_count`.
pub fn trajectory_csv(trajectory: &[PromptState]) -> String {
    let mut out = String::from("batch,batch_score,presence_precision,error_count\n");
    for s in trajectory {
        let presence = s.presence_precision.map(|p| format!("{p:.9}")).unwrap_or_default();
        out.push_str(&format!("{},{:.9},{presence},{}\n", s.batch, s.batch_score, s.error_count));
    }
    out
}
