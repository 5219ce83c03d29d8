use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rins_bench::{rins_model, tokens};

fn forward(c: &mut Criterion) {
    let seq = 32;
    let toks = tokens(seq, 65);
    let mut group = c.benchmark_group("forward");
    for rounds in [1, 2, 4] {
        for kv in [false, true] {
            let m = rins_model(rounds, kv, seq);
            let id = BenchmarkId::new(if kv { "kv_share" } else { "plain" }, rounds);
            group.bench_with_input(id, &m, |b, m| b.iter(|| m.forward(black_box(&toks), rounds).unwrap()));
        }
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let seq = 32;
    let toks = tokens(seq + 1, 65);
    let mut group = c.benchmark_group("loss_and_grads");
    group.sample_size(20);
    for rounds in [1, 2, 4] {
        let m = rins_model(rounds, false, seq);
        group.bench_with_input(BenchmarkId::from_parameter(rounds), &m, |b, m| {
            b.iter(|| m.loss_and_grads(black_box(&toks[..seq]), &toks[1..], rounds).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, forward_backward);
criterion_main!(benches);
