use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use emso::corpus::ForgetSequence;
use emso::exec::Execution;
use emso::metrics::{evaluate, MetricSettings};
use emso::model::{ModelConfig, ModelParameters, TokenId};
use emso::train::{batch_gradient, Span, Term};
use emso::losses::LossKind;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (ModelParameters<f32>, Vec<ForgetSequence>) {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        context_len: 48,
        ..ModelConfig::default()
    };
    let params = ModelParameters::init(&cfg).unwrap();
    let seqs = (0..16u32)
        .map(|i| {
            let tokens: Vec<TokenId> = (0..40).map(|j| 97 + (i * 7 + j * 3) % 26).collect();
            ForgetSequence::new(tokens, 20).unwrap()
        })
        .collect();
    (params, seqs)
}

fn gradients(c: &mut Criterion) {
    let (params, seqs) = setup();
    let batch: Vec<&ForgetSequence> = seqs.iter().collect();
    let term = Term::loss(LossKind::Em);
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(&params, &batch, Span::Continuation, &term, None, exec).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let (params, seqs) = setup();
    let (forget, validation) = seqs.split_at(8);
    let prompts: Vec<Vec<TokenId>> = validation.iter().map(|s| s.prefix().to_vec()).collect();
    let settings = MetricSettings {
        gen_len: 16,
        ..MetricSettings::default()
    };
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&params, forget, validation, &prompts, &settings, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, metrics);
criterion_main!(benches);
