use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedbook_core::aggregation::{aggregate_fedavg, aggregate_phase1, aggregate_phase2};
use fedbook_core::verify::random_uploads;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("aggregation");
    for &(k, n) in &[(4, 16), (8, 64), (16, 128)] {
        let uploads = random_uploads(&mut ChaCha8Rng::seed_from_u64(0), k, 4, n, 32).unwrap();
        let label = format!("k{k}_n{n}");
        group.bench_with_input(BenchmarkId::new("phase1", &label), &uploads, |b, u| {
            b.iter(|| aggregate_phase1(black_box(u), 0.5).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("phase2", &label), &uploads, |b, u| {
            b.iter(|| aggregate_phase2(black_box(u)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("fedavg", &label), &uploads, |b, u| {
            b.iter(|| aggregate_fedavg(black_box(u)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, aggregation);
criterion_main!(benches);
