use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use forge_bench::{qa_dataset, qa_jsonl, words};
use forge_core::budget::{fit_to_context, DefaultTokenizer};
use forge_core::lora::{merge, AdapterPair, Matrix};
use forge_core::pipeline::{execute, PipelineConfig};
use forge_core::scoring::heuristic_score;
use forge_core::{BudgetConfig, Lcg64, Tokenizer};

fn tokenizer(c: &mut Criterion) {
    let text = words(&mut Lcg64::new(1), 2000);
    c.bench_function("tokenize_2000_words", |b| b.iter(|| DefaultTokenizer.count(black_box(&text))));
    let cfg = BudgetConfig {
        context_tokens: 512,
        ..BudgetConfig::default()
    };
    c.bench_function("fit_to_context_512", |b| {
        b.iter(|| fit_to_context(black_box(&text), &cfg, &DefaultTokenizer))
    });
}

fn scoring(c: &mut Criterion) {
    let d = qa_dataset(1000, 2);
    c.bench_function("heuristic_score_1000", |b| {
        b.iter(|| d.records.iter().map(heuristic_score).sum::<f64>())
    });
}

fn lora(c: &mut Criterion) {
    let mut rng = Lcg64::new(3);
    let w = Matrix::from_fn(256, 256, |_, _| rng.next_unit() - 0.5);
    let adapter = AdapterPair::init(256, 256, 8, 16.0, 4).unwrap();
    c.bench_function("merge_256x256_r8", |b| b.iter(|| merge(black_box(&w), &adapter).unwrap()));
}

fn pipeline(c: &mut Criterion) {
    let dir = std::env::temp_dir().join(format!("forge-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("qa.jsonl"), qa_jsonl(2000, 5)).unwrap();
    let cfg = PipelineConfig::from_json(
        r#"{
  "inputs": [{"path": "qa.jsonl", "format": "qa_jsonl", "source": "qa"}],
  "stages": [
    {"op": "clean"},
    {"op": "quality"},
    {"op": "similarity"},
    {"op": "score", "scorer": "heuristic"},
    {"op": "score_filter", "mode": "threshold", "threshold": 0.5},
    {"op": "format"},
    {"op": "fit_to_context"}
  ],
  "output": {"path": "out.jsonl", "format": "text_jsonl"}
}"#,
        &dir,
    )
    .unwrap();
    c.bench_function("pipeline_2000_records", |b| {
        b.iter_batched(|| cfg.clone(), |cfg| execute(&cfg).unwrap(), BatchSize::SmallInput)
    });
    let _ = std::fs::remove_dir_all(&dir);
}

criterion_group!(benches, tokenizer, scoring, lora, pipeline);
criterion_main!(benches);
