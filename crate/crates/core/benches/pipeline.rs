use std::collections::BTreeMap;
use std::hint::black_box;
use std::sync::Arc;

use convkg::answer::ScoringMethod;
use convkg::exec::Execution;
use convkg::graph::{entity_rank, EntityGraph, GraphParams};
use convkg::index::{build_index, InvertedIndex, PassageRecord, RetrievalParams};
use convkg::linking::{Gazetteer, GazetteerEntry, MentionKind};
use convkg::metrics::{evaluate_run, EvalConfig, QRels, ReferenceSet, TurnKey};
use convkg::pipeline::{PipelineBuilder, PipelineConfig, RunRecord, Topic};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sentence(rng: &mut ChaCha8Rng, vocab: usize, words: usize) -> String {
    let mut s: Vec<String> = (0..words).map(|_| format!("w{}", rng.random_range(0..vocab))).collect();
    s[0] = format!("Z{}", s[0]);
    s.join(" ") + "."
}

fn corpus(n: usize, seed: u64) -> InvertedIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n).map(|i| PassageRecord {
        id: format!("p{i:06}"),
        text: (0..3).map(|_| sentence(&mut rng, 5_000, 15)).collect::<Vec<_>>().join(" "),
        source: String::new(),
    });
    build_index(records.collect::<Vec<_>>()).unwrap()
}

fn bench_retrieve(c: &mut Criterion) {
    let index = corpus(20_000, 1);
    let params = RetrievalParams::default();
    let mut group = c.benchmark_group("retrieve");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| index.retrieve_with(black_box("w12 w404 w2048 w7 w999"), &params, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_entity_rank(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let graphs: Vec<EntityGraph> = (0..64)
        .map(|_| {
            let n = 100;
            let mut w = vec![0.0; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.1) {
                        let x = rng.random_range(0.1..1.0);
                        w[i * n + j] = x;
                        w[j * n + i] = x;
                    }
                }
            }
            EntityGraph::from_weights((0..n).map(|i| format!("e{i}")).collect(), w).unwrap()
        })
        .collect();
    let params = GraphParams::default();
    let mut group = c.benchmark_group("entity_rank_64_graphs");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| exec.map(&graphs, |g| entity_rank(g, &params).unwrap()))
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut qrels = BTreeMap::new();
    let mut refs = BTreeMap::new();
    let mut run = Vec::new();
    for t in 0..100 {
        for turn in 1..=10 {
            let key = TurnKey { topic: format!("t{t}"), turn };
            let judged: BTreeMap<String, u8> = (0..20).map(|k| (format!("p{k:03}"), rng.random_range(0..5))).collect();
            let passages: Vec<String> = (0..3).map(|_| sentence(&mut rng, 300, 60)).collect();
            run.push(RunRecord {
                topic: key.topic.clone(),
                turn,
                raw_query: String::new(),
                prompt: String::new(),
                rewritten_query: String::new(),
                ranked: (0..100).map(|k| format!("p{:03}", (k * 7 + turn) % 100)).collect(),
                selected: Vec::new(),
                method: ScoringMethod::O,
                answer: sentence(&mut rng, 300, 70),
                answer_words: 70,
                fallbacks: Vec::new(),
            });
            qrels.insert(key.clone(), judged);
            refs.insert(key, passages);
        }
    }
    let (qrels, refs) = (QRels(qrels), ReferenceSet(refs));
    let config = EvalConfig::default();
    let mut group = c.benchmark_group("evaluate_run_1000_turns");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_run(&run, &qrels, &refs, &config, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_topics(c: &mut Criterion) {
    let index = Arc::new(corpus(5_000, 4));
    let entries = (0..200).map(|i| GazetteerEntry {
        surface: format!("w{}", i * 7),
        entity_id: format!("E{i}"),
        confidence: 1.0,
        kind: MentionKind::Concept,
    });
    let gazetteer = Gazetteer::new(entries);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let topics: Vec<Topic> = (0..16)
        .map(|t| Topic { topic: format!("t{t}"), turns: (0..5).map(|_| sentence(&mut rng, 1_400, 6)).collect() })
        .collect();
    let mut group = c.benchmark_group("run_16_topics");
    group.sample_size(10);
    for (name, exec) in MODES {
        let pipeline = PipelineBuilder::new(Arc::clone(&index))
            .linker(Box::new(gazetteer.clone()))
            .config(PipelineConfig::default())
            .execution(exec)
            .build()
            .unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pipeline.run_topics(&topics).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_retrieve, bench_entity_rank, bench_evaluate, bench_topics);
criterion_main!(benches);
