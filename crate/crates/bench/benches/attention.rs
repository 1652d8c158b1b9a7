use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use respagent_bench::{attention_case, attention_cost, default_scale, dense_reference_attention, sparse_attention};
use std::hint::black_box;

const D: usize = 32;
const WINDOW: usize = 32;
const GLOBALS: usize = 126;

fn sparse_vs_dense(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for n in [128usize, 256, 512, 1024] {
        let (q, k, v, p) = attention_case(n, WINDOW, GLOBALS, D, n as u64);
        let scale = default_scale(D);
        group.throughput(Throughput::Elements(attention_cost(&p)));
        group.bench_with_input(BenchmarkId::new("sparse", n), &n, |b, _| b.iter(|| sparse_attention(black_box(&q), &k, &v, &p, scale).unwrap()));
        if n <= 512 {
            group.bench_with_input(BenchmarkId::new("dense_masked", n), &n, |b, _| {
                b.iter(|| dense_reference_attention(black_box(&q), &k, &v, &p, scale).unwrap())
            });
        }
    }
    group.finish();
}

fn sparse_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("sparse_scaling");
    group.sample_size(10);
    for n in [512usize, 1024, 2048, 4096] {
        let (q, k, v, p) = attention_case(n, WINDOW, GLOBALS, D, 7);
        let scale = default_scale(D);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| sparse_attention(black_box(&q), &k, &v, &p, scale).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, sparse_vs_dense, sparse_scaling);
criterion_main!(benches);
