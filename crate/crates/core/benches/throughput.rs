use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use extractkit::executor::{ExecOptions, Executor, RunConfig};
use extractkit::ingest::Chunk;
use extractkit::par::Strategy;
use extractkit::relevance::{filter_chunks_with, KeywordSet, MatchMode, Scorer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};

const WORDS: &[&str] = &[
    "revenue", "margin", "guidance", "inflation", "freight", "copper", "aluminium", "wheat", "demand", "pricing",
    "quarter", "inventory", "supply", "tariff", "currency", "volume", "contract", "shipping", "energy", "labour",
];

fn synthetic_chunks(n: usize, words_per_chunk: usize) -> Vec<Chunk> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let text: Vec<&str> = (0..words_per_chunk).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            Chunk {
                chunk_id: format!("d{}:{:05}", i / 10, i % 10),
                doc_id: format!("d{}", i / 10),
                ordinal: i % 10,
                text: text.join(" "),
                relevance_score: None,
            }
        })
        .collect()
}

fn strategies() -> [(&'static str, Strategy); 2] {
    [("sequential", Strategy::Sequential), ("parallel", Strategy::Parallel { threads: 0 })]
}

fn relevance(c: &mut Criterion) {
    let chunks = synthetic_chunks(2000, 80);
    let ks = KeywordSet::new(&["aluminum", "tarif", "copper price", "shipments"], MatchMode::ExactToken, Some(0.8)).unwrap();
    let mut group = c.benchmark_group("fuzzy_filter_2000_chunks");
    for (name, strategy) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| filter_chunks_with(&chunks, &ks, Scorer::Fuzzy, 0.8, strategy))
        });
    }
    group.finish();
}

fn executor(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("corpus")).unwrap();
    for d in 0..8 {
        let paras: Vec<String> = (0..8).map(|p| format!("Doc {d} paragraph {p} mentions copper and wheat.")).collect();
        fs::write(dir.path().join(format!("corpus/d{d}.txt")), paras.join("\n\n")).unwrap();
    }
    fs::write(
        dir.path().join("schema.yaml"),
        "name: goods\ncontainer: list-of-records\nprompt_template: \"{field_docs}\\n---\\n{chunk_text}\"\nfields:\n  - {name: good, kind: string}\n",
    )
    .unwrap();
    fs::write(dir.path().join("pricing.yaml"), "mock: {m: {input_per_1m: '1.00', output_per_1m: '2.00'}}\n").unwrap();
    let base = RunConfig::parse(
        "workspace: ws\ndata: {source: corpus, format: txt}\nschema: schema.yaml\npricing: pricing.yaml\n\
         provider: {provider_id: mock, model_id: m}\n\
         providers:\n  - kind: mock\n    provider_id: mock\n    inline:\n      mode: collect\n      on_miss: empty\n      empty_body: '[]'\n      latency_ms: 2\n      rules:\n        - {pattern: copper, body: '{\"good\": \"copper\"}'}\n        - {pattern: wheat, body: '{\"good\": \"wheat\"}'}\n\
         cache: {enabled: false}\nbatch_size: 16\n",
    )
    .unwrap()
    .resolved(dir.path());
    let counter = AtomicUsize::new(0);
    let mut group = c.benchmark_group("mock_run_64_chunks");
    group.sample_size(10);
    for (name, concurrency) in [("sequential", 1), ("parallel", 8)] {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || {
                    let mut cfg = base.clone();
                    cfg.concurrency = concurrency;
                    cfg.run_id = Some(format!("bench{}", counter.fetch_add(1, Ordering::Relaxed)));
                    Executor::new(cfg).unwrap()
                },
                |exec| exec.run(&ExecOptions::default()).unwrap(),
                BatchSize::PerIteration,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, relevance, executor);
criterion_main!(benches);
