use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ebdl_bench::{joint_batch, model};
use ebdl_core::losses::{dsm_loss, joint_loss};
use ebdl_core::math::stream_rng;
use ebdl_core::GaussianMixture;

fn log_density(c: &mut Criterion) {
    let m = model(64, 4);
    let mut group = c.benchmark_group("log_density");
    for n in [256, 2048] {
        let x = GaussianMixture::mog2(2).sample(n, &mut stream_rng(0, 2));
        let t = vec![0.3; n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| m.log_density(&t, x.view()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("score", n), &x, |b, x| b.iter(|| m.score(&t, x.view()).unwrap()));
    }
    group.finish();
}

fn loss_gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_gradient");
    group.sample_size(20);
    for (width, depth) in [(32, 2), (64, 4)] {
        let m = model(width, depth);
        let batch = joint_batch(256);
        let label = format!("{width}x{depth}");
        group.bench_function(BenchmarkId::new("dsm", &label), |b| {
            b.iter(|| dsm_loss(&m, batch.dsm.as_ref().unwrap()).unwrap())
        });
        group.bench_function(BenchmarkId::new("dsm+clf", &label), |b| b.iter(|| joint_loss(&m, &batch).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, log_density, loss_gradients);
criterion_main!(benches);
