use criterion::{criterion_group, criterion_main, Criterion};
use ebdl_bench::{family, model, vp};
use ebdl_core::density::AtTime;
use ebdl_core::free_energy::{mbar_solve, MbarProblem};
use ebdl_core::losses::Process;
use ebdl_core::math::{linspace, stream_rng};
use ebdl_core::samplers::{dm_denoise, mala_chain, smc_classic, ParticleSystem, SmcConfig};
use ebdl_core::{GaussianMixture, Target};
use ndarray::Array2;

fn denoise(c: &mut Criterion) {
    let Process::Dm(sched) = vp() else { unreachable!() };
    let grid = linspace(1.0, 1e-3, 100);
    let fam = family();
    let m = model(64, 4);
    let mut group = c.benchmark_group("dm_denoise_100");
    group.sample_size(10);
    group.bench_function("oracle", |b| b.iter(|| dm_denoise(&fam, &sched, &grid, 500, 0).unwrap()));
    group.bench_function("model", |b| b.iter(|| dm_denoise(&m, &sched, &grid, 500, 0).unwrap()));
    group.finish();
}

fn mcmc(c: &mut Criterion) {
    let fam = family();
    let target = AtTime { density: &fam, t: 0.0 };
    let x0 = GaussianMixture::standard_normal(2).sample(1000, &mut stream_rng(0, 3));
    c.bench_function("mala_50_steps", |b| b.iter(|| mala_chain(&target, x0.clone(), 0.05, 50, 0).unwrap()));

    let levels: Vec<_> = linspace(0.0, 1.0, 17).into_iter().map(|t| AtTime { density: &fam, t }).collect();
    let targets: Vec<&dyn Target> = levels.iter().map(|l| l as &dyn Target).collect();
    let start = fam.at(1.0).unwrap().sample(1000, &mut stream_rng(0, 4));
    let cfg = SmcConfig { mala_steps: 4, ..SmcConfig::default() };
    let mut group = c.benchmark_group("smc");
    group.sample_size(10);
    group.bench_function("classic_16_levels", |b| {
        b.iter(|| smc_classic(&targets, ParticleSystem::new(start.clone(), 0), &cfg).unwrap())
    });
    group.finish();
}

fn mbar(c: &mut Criterion) {
    // Reduced energies of 8 shifted unit Gaussians, 500 samples each.
    let (k, n) = (8, 500);
    let mut rng = stream_rng(0, 5);
    let samples = GaussianMixture::standard_normal(1).sample(k * n, &mut rng);
    let centers = linspace(0.0, 2.0, k);
    let x: Vec<f64> = (0..k * n).map(|i| samples[[i, 0]] + centers[i / n]).collect();
    let energies = Array2::from_shape_fn((k, k * n), |(s, i)| 0.5 * (x[i] - centers[s]).powi(2));
    let problem = MbarProblem::new(energies, vec![n; k]).unwrap();
    c.bench_function("mbar_8_states", |b| b.iter(|| mbar_solve(&problem, 1e-10, 10_000).unwrap()));
}

criterion_group!(benches, denoise, mcmc, mbar);
criterion_main!(benches);
