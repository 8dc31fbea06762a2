use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use homa_bench::{head_inputs, LENGTHS, WINDOWS};
use homa_core::attention::{pairwise_attention, triadic_attention_naive, triadic_attention_windowed};
use homa_core::blocks::{blocked_attention, plan_blocks, BlockMode};

fn triadic_window(c: &mut Criterion) {
    let mut g = c.benchmark_group("triadic_windowed");
    for len in LENGTHS {
        let h = head_inputs(len, 7);
        for w in WINDOWS {
            g.bench_with_input(BenchmarkId::new(format!("L{len}"), w), &w, |b, &w| {
                b.iter(|| triadic_attention_windowed(black_box(&h), w).unwrap())
            });
        }
    }
    g.finish();
}

fn reference_kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("reference");
    g.sample_size(10);
    for len in [16, 32] {
        let h = head_inputs(len, 3);
        g.bench_with_input(BenchmarkId::new("triadic_naive", len), &h, |b, h| {
            b.iter(|| triadic_attention_naive(black_box(h)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("pairwise", len), &h, |b, h| {
            b.iter(|| pairwise_attention(black_box(h)).unwrap())
        });
    }
    g.finish();
}

fn blocked(c: &mut Criterion) {
    let mut g = c.benchmark_group("blocked");
    for len in LENGTHS {
        let h = head_inputs(len, 11);
        let plan = plan_blocks(len, 16, 8).unwrap();
        for (name, mode) in [("pairwise", BlockMode::PairwiseOnly), ("triadic", BlockMode::TriadicOnly)] {
            g.bench_with_input(BenchmarkId::new(name, len), &h, |b, h| {
                b.iter(|| blocked_attention(black_box(h), &plan, 5, mode, None).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, triadic_window, reference_kernels, blocked);
criterion_main!(benches);
