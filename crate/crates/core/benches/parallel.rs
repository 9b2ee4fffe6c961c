//! Forward pass, loss, and evaluation at one thread versus every core.
//!
//! Build with `--no-default-features` to measure the sequential fallback
//! itself; with the default build the one-thread pool stands in for it.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hegraph_core::adapter::{forward, AdapterWeights, MetaPathWeights, Mode};
use hegraph_core::loss::{total_loss, LossConfig};
use hegraph_core::par::with_threads;
use hegraph_core::synth::{generate, SyntheticSpec};
use hegraph_core::train::{evaluate, TrainConfig};

fn bench(c: &mut Criterion) {
    let task = generate(&SyntheticSpec {
        classes: 32,
        shots: 16,
        dim: 256,
        test_per_class: 20,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let graph = task.graph().unwrap();
    let test = task.test_set().unwrap();
    let weights = AdapterWeights::gaussian(256, 0.05, 1);
    let mp = MetaPathWeights::default();
    let cfg = TrainConfig::default();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());

    let mut group = c.benchmark_group("step");
    group.sample_size(20);
    for threads in [1, cores] {
        group.bench_with_input(BenchmarkId::new("forward_loss_backward", threads), &threads, |b, &t| {
            b.iter(|| {
                with_threads(t, || {
                    let out = forward(&graph, &weights, &mp, Mode::Train).unwrap();
                    let (_, g) =
                        total_loss(&graph.cache, &graph.labels, &out, &graph.labels, &LossConfig::default())
                            .unwrap();
                    out.tape.backward(&g.xp_tilde, &g.cache_tilde).unwrap()
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("evaluate", threads), &threads, |b, &t| {
            b.iter(|| with_threads(t, || evaluate(&graph, &weights, &test, &cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
