use criterion::{black_box, criterion_group, criterion_main, Criterion};

use crossview_bench::{model, samples};
use crossview_core::masks::{MaskKind, MaskPolicy};
use crossview_core::prefgen::make_pairs;
use crossview_core::training::{example_gradient, examples_from_gold, TrainConfig};

fn forward(c: &mut Criterion) {
    let m = model();
    let s = &samples(1)[0];
    let prompt = s.prompt();
    for policy in [MaskKind::Causal.into(), MaskPolicy::CROSS_ATTENTIVE, MaskKind::Truncated.into()] {
        c.bench_function(&format!("forward/{policy}"), |b| b.iter(|| m.forward(black_box(&prompt), policy).unwrap()));
    }
}

fn training(c: &mut Criterion) {
    let m = model();
    let data = samples(1);
    let mut ex = examples_from_gold(&data).remove(0);
    ex.minus = vec![ex.plus[0] + 1];
    let cfg = TrainConfig::default();
    c.bench_function("example_gradient/alternating", |b| {
        b.iter(|| example_gradient(&m, black_box(&ex), (0.0, 0.0), &cfg).unwrap())
    });
    let batch = samples(32);
    c.bench_function("make_pairs/32", |b| {
        b.iter(|| make_pairs(&m, black_box(&batch), MaskPolicy::CROSS_ATTENTIVE).unwrap())
    });
}

criterion_group!(benches, forward, training);
criterion_main!(benches);
