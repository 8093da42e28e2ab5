use std::hint::black_box;

use attnprune::attention::{self_attention, Lengths, MaskPolicy};
use attnprune::data::{Domain, DomainSpec, Teacher};
use attnprune::model::{ModelConfig, ModelParams, PruneMode};
use attnprune::tensor::{Tape, Tensor};
use attnprune::training::{PruneConfig, TrainConfig, Trainer};
use criterion::{criterion_group, criterion_main, Criterion};

fn filled(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = filled(&[16, 48, 64], 1);
    let b = filled(&[64, 64], 2);
    c.bench_function("matmul_forward_backward_16x48x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(a.clone());
            let w = tape.param(b.clone());
            let y = tape.matmul(x, w).unwrap();
            let loss = tape.mean_all(y);
            tape.backward(loss).unwrap();
            black_box(tape.grad(w));
        })
    });
}

fn attention(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let attn = &params.decoder[0].attn;
    let x = filled(&[16, 48, cfg.model_dim], 3);
    let lens = Lengths::uniform(16, 48).unwrap();
    let mut group = c.benchmark_group("self_attention_16x48");
    for name in ["none", "vanilla", "hard", "soft"] {
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let vars = attn.register(&mut tape, true);
                let xv = tape.constant(x.clone());
                let policy = match name {
                    "vanilla" => MaskPolicy::Vanilla,
                    "hard" => MaskPolicy::Hard { theta: 1.0 },
                    "soft" => MaskPolicy::Soft {
                        theta: tape.param(Tensor::scalar(1.0)),
                        temperature: 0.01,
                    },
                    _ => MaskPolicy::None,
                };
                let out = self_attention(&mut tape, xv, &vars, &lens, &policy).unwrap();
                let loss = tape.mean_all(out.out);
                tape.backward(loss).unwrap();
                black_box(tape.grad(vars.w_q));
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let model = ModelConfig::default();
    let teacher = Teacher::for_model(&model, 0);
    let spec = DomainSpec::default();
    let data = attnprune::data::sample_dataset(&teacher, Domain::In, &spec, 4, 200, 0).unwrap();
    let groups = data.by_length();
    let idx = &groups[&12][..16.min(groups[&12].len())];
    let batch = data.collate(idx).unwrap();
    let mut group = c.benchmark_group("train_step_default");
    group.sample_size(20);
    for (name, mode, phase1) in [
        ("none", PruneMode::None, 0),
        ("vanilla", PruneMode::Vanilla, 0),
        ("phase1", PruneMode::Differentiable, 1_000_000),
        ("phase2", PruneMode::Differentiable, 0),
    ] {
        let cfg = TrainConfig {
            prune: PruneConfig {
                mode,
                phase1_steps: phase1,
                total_steps: 2_000_000,
                ..PruneConfig::default()
            },
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&cfg, 0).unwrap();
        group.bench_function(name, |bench| {
            bench.iter_batched(
                || trainer.clone(),
                |mut t| black_box(t.step_on(&batch).unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention, train_step);
criterion_main!(benches);
