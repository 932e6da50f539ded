//! Compares the data-parallel MTTKRP and reconstruction kernels against the
//! sequential baselines across a few shapes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvtc::matrix::Matrix;
use mvtc::tensor::{mttkrp, mttkrp_seq, reconstruct, reconstruct_seq, FactorSet, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(dims: [usize; 4], rank: usize, seed: u64) -> (Tensor4, FactorSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let t = Tensor4::from_vec(dims, data).unwrap();
    let theta = FactorSet::new(
        Matrix::random_uniform(dims[0], rank, &mut rng),
        Matrix::random_uniform(dims[1], rank, &mut rng),
        Matrix::random_uniform(dims[2], rank, &mut rng),
        Matrix::random_uniform(dims[3], rank, &mut rng),
    )
    .unwrap();
    (t, theta)
}

fn bench_mttkrp(c: &mut Criterion) {
    let mut group = c.benchmark_group("mttkrp_mode1");
    for &(dims, rank) in &[([32, 8, 4, 32], 4), ([64, 16, 4, 64], 8)] {
        let (t, theta) = random_instance(dims, rank, 7);
        let label = format!("{}x{}x{}x{}_F{}", dims[0], dims[1], dims[2], dims[3], rank);
        group.bench_with_input(BenchmarkId::new("parallel", &label), &t, |b, t| {
            b.iter(|| mttkrp(t, [&theta.b, &theta.c, &theta.d], 1).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", &label), &t, |b, t| {
            b.iter(|| mttkrp_seq(t, [&theta.b, &theta.c, &theta.d], 1).unwrap())
        });
    }
    group.finish();
}

fn bench_reconstruct(c: &mut Criterion) {
    let mut group = c.benchmark_group("reconstruct");
    for &(dims, rank) in &[([32, 8, 4, 32], 4), ([64, 16, 4, 64], 8)] {
        let (_, theta) = random_instance(dims, rank, 11);
        let label = format!("{}x{}x{}x{}_F{}", dims[0], dims[1], dims[2], dims[3], rank);
        group.bench_with_input(BenchmarkId::new("parallel", &label), &theta, |b, th| {
            b.iter(|| reconstruct(th))
        });
        group.bench_with_input(BenchmarkId::new("sequential", &label), &theta, |b, th| {
            b.iter(|| reconstruct_seq(th))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_mttkrp, bench_reconstruct);
criterion_main!(benches);
