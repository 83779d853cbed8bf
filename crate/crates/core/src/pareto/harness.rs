//! Evaluates keyword sets against the real extraction path.

use super::{ParetoError, Split, SplitEvaluator};
use crate::cost::{cost_at, scale_to_population, CostLedger, Money, TokenUsage};
use crate::evaluation::{group_values, recall_on_field, split_dataset, IdKey};
use crate::executor::{AuditEntry, ChunkOutcome, Engine, EXTRACTOR_ROLE};
use crate::ingest::Chunk;
use crate::par::{self, Strategy};
use crate::relevance::RelevanceFilter;
use crate::schema::ValidatedRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

/// Chunks and references of one split, plus the chunks whose cost is sampled.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub chunks: Vec<Chunk>,
    pub refs: BTreeMap<String, Value>,
    pub sample: BTreeSet<String>,
}

impl SplitData {
    fn new(chunks: Vec<Chunk>, refs: BTreeMap<String, Value>, sample_size: usize, seed: u64) -> Self {
        let mut ids: Vec<&String> = chunks.iter().map(|c| &c.chunk_id).collect();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = ids
            .choose_multiple(&mut rng, sample_size.min(ids.len()))
            .map(|s| s.to_string())
            .collect();
        Self { chunks, refs, sample }
    }
}

#[derive(Debug, Clone)]
struct ChunkRun {
    records: Vec<ValidatedRecord>,
    usage: Option<TokenUsage>,
}

pub struct PipelineEvaluator<'a> {
    engine: &'a Engine,
    ledger: &'a CostLedger,
    base: RelevanceFilter,
    field: String,
    train: SplitData,
    test: SplitData,
    strategy: Strategy,
    memo: Mutex<HashMap<String, Arc<ChunkRun>>>,
    audit: Mutex<Vec<AuditEntry>>,
}

impl<'a> PipelineEvaluator<'a> {
    /// Splits the labelled documents into train and test, keeping only chunks
    /// of labelled documents. `refs` maps doc id to the reference mentions.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        engine: &'a Engine,
        ledger: &'a CostLedger,
        base: RelevanceFilter,
        field: &str,
        chunks: &[Chunk],
        refs: &BTreeMap<String, Value>,
        train_fraction: f64,
        sample_size: usize,
        seed: u64,
        strategy: Strategy,
    ) -> Result<Self, ParetoError> {
        let docs: Vec<String> = refs.keys().cloned().collect();
        let (train_docs, test_docs) =
            split_dataset(&docs, train_fraction, seed).map_err(|e| ParetoError::Eval(e.to_string()))?;
        let part = |ids: &[String], salt: u64| {
            let set: BTreeSet<&String> = ids.iter().collect();
            let cs = chunks.iter().filter(|c| set.contains(&c.doc_id)).cloned().collect();
            let rs = refs.iter().filter(|(k, _)| set.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
            SplitData::new(cs, rs, sample_size, seed.wrapping_add(salt))
        };
        Ok(Self {
            engine,
            ledger,
            base,
            field: field.to_string(),
            train: part(&train_docs, 0),
            test: part(&test_docs, 1),
            strategy,
            memo: Mutex::new(HashMap::new()),
            audit: Mutex::new(Vec::new()),
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Calls made so far, in completion order.
    pub fn audit(&self) -> Vec<AuditEntry> {
        self.audit.lock().expect("audit lock").clone()
    }

    fn run_chunk(&self, chunk: &Chunk) -> Result<Arc<ChunkRun>, ParetoError> {
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&chunk.chunk_id) {
            return Ok(hit.clone());
        }
        let processed = self
            .engine
            .extract_chunk(chunk, self.ledger, EXTRACTOR_ROLE)
            .map_err(|e| ParetoError::Eval(e.to_string()))?
            .ok_or(ParetoError::BudgetHalt)?;
        let records = match processed.result.outcome {
            ChunkOutcome::Extracted { records } => records,
            ChunkOutcome::Failed { .. } => Vec::new(),
        };
        let run = Arc::new(ChunkRun { records, usage: processed.usage });
        self.audit.lock().expect("audit lock").push(processed.audit);
        self.memo.lock().expect("memo lock").insert(chunk.chunk_id.clone(), run.clone());
        Ok(run)
    }
}

impl SplitEvaluator for PipelineEvaluator<'_> {
    fn evaluate(&self, split: Split, keywords: &[String]) -> Result<(f64, Money), ParetoError> {
        let data = self.split(split);
        let filter = self.base.with_keywords(keywords).map_err(|e| ParetoError::Eval(e.to_string()))?;
        let kept = filter.apply(&data.chunks).kept;
        let runs = par::map_ordered(&kept, self.strategy, |c| self.run_chunk(c));
        let mut records = Vec::new();
        let mut sampled = Money::ZERO;
        for (chunk, run) in kept.iter().zip(runs) {
            let run = run?;
            records.extend(run.records.iter().cloned());
            if data.sample.contains(&chunk.chunk_id) {
                if let Some(u) = &run.usage {
                    sampled += cost_at(u, self.engine.price);
                }
            }
        }
        let grouped = group_values(&records, &self.field, IdKey::Doc);
        let recall = recall_on_field(&grouped, &data.refs).value.unwrap_or(0.0);
        let cost = scale_to_population(sampled, data.sample.len() as u64, data.chunks.len() as u64)
            .map_err(|e| ParetoError::Eval(e.to_string()))?;
        Ok((recall, cost))
    }
}
