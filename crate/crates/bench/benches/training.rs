use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use homa_bench::step_config;
use homa_core::harness::Workload;
use homa_core::AttentionKind;

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for kind in AttentionKind::ALL {
        for len in [32, 64] {
            let mut work = Workload::<f64>::new(&step_config(kind, len)).unwrap();
            g.bench_function(BenchmarkId::new(kind.to_string(), len), |b| b.iter(|| work.step().unwrap()));
        }
    }
    g.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
