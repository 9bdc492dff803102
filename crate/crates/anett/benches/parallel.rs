//! Benchmarks comparing the data-parallel projector/FBP kernels against the
//! sequential reference implementations.
//!
//! Run with `cargo bench` (parallel kernels enabled by default) and
//! `cargo bench --no-default-features` to time the sequential-only build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use anett::grid::{Image, Sinogram};
use anett::tomo::{
    default_detectors, fbp, fbp_seq, radon_adjoint, radon_adjoint_seq, radon_forward,
    radon_forward_seq, FbpFilter, Geometry,
};

fn random_image(n: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_values(n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn random_sinogram(g: &Geometry, seed: u64) -> Sinogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sinogram::from_values(
        g.n_angles(),
        g.n_detectors(),
        (0..g.n_angles() * g.n_detectors())
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("radon_forward");
    for &n in &[64usize, 128] {
        let g = Geometry::new(60, default_detectors(n), n).unwrap();
        let u = random_image(n, 1);
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, _| {
            b.iter(|| radon_forward(&u, &g).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, _| {
            b.iter(|| radon_forward_seq(&u, &g).unwrap())
        });
    }
    group.finish();
}

fn bench_adjoint(c: &mut Criterion) {
    let mut group = c.benchmark_group("radon_adjoint");
    for &n in &[64usize, 128] {
        let g = Geometry::new(60, default_detectors(n), n).unwrap();
        let y = random_sinogram(&g, 2);
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, _| {
            b.iter(|| radon_adjoint(&y, &g).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, _| {
            b.iter(|| radon_adjoint_seq(&y, &g).unwrap())
        });
    }
    group.finish();
}

fn bench_fbp(c: &mut Criterion) {
    let mut group = c.benchmark_group("fbp");
    for &n in &[64usize, 128] {
        let g = Geometry::new(60, default_detectors(n), n).unwrap();
        let y = radon_forward(&random_image(n, 3), &g).unwrap();
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, _| {
            b.iter(|| fbp(&y, &g, FbpFilter::RamLak).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, _| {
            b.iter(|| fbp_seq(&y, &g, FbpFilter::RamLak).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_forward, bench_adjoint, bench_fbp
}
criterion_main!(benches);
