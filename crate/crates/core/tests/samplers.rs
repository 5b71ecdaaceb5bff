use ebdl_core::density::{AtTime, Flat, Geometric};
use ebdl_core::math::{linspace, mean, stream_rng, variance};
use ebdl_core::metrics::sliced_ks;
use ebdl_core::samplers::{
    dm_denoise, ess, mala_chain, mala_log_proposal_ratio, multinomial_resample, si_integrate, smc_classic,
    smc_diffusion, Direction, ParticleSystem, SiKernels, SmcConfig,
};
use ebdl_core::{GaussianMixture, MarginalFamily, NoisingSchedule, Target};
use ndarray::{arr1, arr2, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;

fn column(x: &Array2<f64>, j: usize) -> Vec<f64> {
    x.column(j).to_vec()
}

fn gauss_1d(m: f64, v: f64) -> GaussianMixture {
    GaussianMixture::new(vec![1.0], arr2(&[[m]]), arr2(&[[v]])).unwrap()
}

fn decreasing(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut g = linspace(lo, hi, n);
    g.reverse();
    g
}

/// Two-sample KS critical value at the 1% level for equal sizes.
fn ks_crit(n: usize) -> f64 {
    1.63 * (2.0 / n as f64).sqrt()
}

#[test]
fn denoiser_recovers_a_gaussian() {
    let sched = NoisingSchedule::vp_default();
    let fam = MarginalFamily::Dm { sched, base: gauss_1d(1.5, 0.5) };
    let t_end = 1e-3;
    let grid = decreasing(t_end, 1.0, 1001);
    let n = 20_000;
    let y = dm_denoise(&fam, &sched, &grid, n, 3).unwrap();
    let target = fam.at(t_end).unwrap();
    let (m, v) = (target.means()[[0, 0]], target.vars()[[0, 0]]);
    let col = column(&y, 0);
    let se_mean = (v / n as f64).sqrt();
    let se_var = v * (2.0 / n as f64).sqrt();
    assert!((mean(&col) - m).abs() < 4.0 * se_mean, "{} vs {m}", mean(&col));
    assert!((variance(&col) - v).abs() < 4.0 * se_var, "{} vs {v}", variance(&col));
}

#[test]
fn denoiser_with_zero_score_adds_up_the_variances() {
    let sched = NoisingSchedule::ve(0.01, 5.0);
    let grid = decreasing(0.05, 0.95, 41);
    let n = 40_000;
    let y = dm_denoise(&Flat { d: 2 }, &sched, &grid, n, 8).unwrap();
    let mut expected = sched.eval(grid[0]).unwrap().gamma.powi(2);
    for w in grid.windows(2) {
        let e = sched.eval(w[0]).unwrap();
        assert_eq!(e.f, 0.0);
        expected += e.g * e.g * (w[0] - w[1]);
    }
    for j in 0..2 {
        let col = column(&y, j);
        assert!(mean(&col).abs() < 4.0 * (expected / n as f64).sqrt());
        let rel = variance(&col) / expected - 1.0;
        assert!(rel.abs() < 4.0 * (2.0 / n as f64).sqrt(), "{rel}");
    }
}

#[test]
fn doubling_the_steps_halves_the_mean_bias() {
    let sched = NoisingSchedule::vp_default();
    let fam = MarginalFamily::Dm { sched, base: gauss_1d(2.0, 0.2) };
    let t_end = 0.05;
    let exact = fam.at(t_end).unwrap().means()[[0, 0]];
    let n = 200_000;
    let bias = |k: usize| {
        let y = dm_denoise(&fam, &sched, &decreasing(t_end, 1.0, k + 1), n, 5).unwrap();
        (mean(&column(&y, 0)) - exact).abs()
    };
    let (coarse, fine) = (bias(20), bias(40));
    let ratio = coarse / fine;
    assert!((1.6..2.5).contains(&ratio), "bias {coarse} -> {fine}");
}

fn two_gaussians() -> MarginalFamily {
    MarginalFamily::Si {
        amp: 1.0,
        m0: gauss_1d(-1.0, 0.3),
        m1: gauss_1d(2.0, 0.5),
    }
}

#[test]
fn interpolant_sde_reaches_the_far_end() {
    let fam = two_gaussians();
    let kernels = SiKernels { velocity: &fam, score: &fam, amp: 1.0, g: 0.5 };
    let (lo, hi) = (1e-3, 1.0 - 1e-3);
    let n = 20_000;
    let x0 = fam.at(lo).unwrap().sample(n, &mut stream_rng(1, 0));
    let y = si_integrate(&kernels, &linspace(lo, hi, 801), Direction::Forward, x0, 2).unwrap();
    let end = fam.at(hi).unwrap();
    let (m, v) = (end.means()[[0, 0]], end.vars()[[0, 0]]);
    let col = column(&y, 0);
    assert!((mean(&col) - m).abs() < 4.0 * (v / n as f64).sqrt() + 5e-3, "{}", mean(&col));
    assert!((variance(&col) / v - 1.0).abs() < 0.05);
}

#[test]
fn zero_diffusion_is_the_gaussian_transport_map() {
    let fam = two_gaussians();
    let kernels = SiKernels { velocity: &fam, score: &fam, amp: 1.0, g: 0.0 };
    let (lo, hi) = (1e-3, 1.0 - 1e-3);
    let moments = |t: f64| {
        let m = fam.at(t).unwrap();
        (m.means()[[0, 0]], m.vars()[[0, 0]].sqrt())
    };
    let (m_lo, s_lo) = moments(lo);
    let (m_hi, s_hi) = moments(hi);
    let x0 = Array2::from_shape_vec((5, 1), vec![-2.5, -1.2, -1.0, 0.0, 0.7]).unwrap();
    let y = si_integrate(&kernels, &linspace(lo, hi, 4001), Direction::Forward, x0.clone(), 0).unwrap();
    for (a, b) in x0.iter().zip(y.iter()) {
        let exact = m_hi + s_hi / s_lo * (a - m_lo);
        assert!((b - exact).abs() < 5e-3, "{b} vs {exact}");
    }
}

#[test]
fn forward_then_backward_returns_the_start_distribution() {
    let fam = MarginalFamily::Si {
        amp: 1.0,
        m0: GaussianMixture::isotropic(vec![0.5, 0.5], arr2(&[[-1.5, 0.0], [1.5, 0.5]]), 0.2).unwrap(),
        m1: GaussianMixture::standard_normal(2),
    };
    let kernels = SiKernels { velocity: &fam, score: &fam, amp: 1.0, g: 0.7 };
    let (lo, hi) = (1e-3, 1.0 - 1e-3);
    let n = 3000;
    let start = fam.at(lo).unwrap();
    let x0 = start.sample(n, &mut stream_rng(4, 0));
    let grid = linspace(lo, hi, 801);
    let mid = si_integrate(&kernels, &grid, Direction::Forward, x0, 10).unwrap();
    let mut back_grid = grid.clone();
    back_grid.reverse();
    let back = si_integrate(&kernels, &back_grid, Direction::Backward, mid, 11).unwrap();
    let fresh = start.sample(n, &mut stream_rng(4, 1));
    let ks = sliced_ks(back.view(), fresh.view(), 64, &mut stream_rng(4, 2)).unwrap();
    assert!(ks < ks_crit(n), "{ks}");
}

#[test]
fn interpolant_rejects_bad_grids() {
    let fam = two_gaussians();
    let kernels = SiKernels { velocity: &fam, score: &fam, amp: 1.0, g: 0.1 };
    let x0 = Array2::zeros((4, 1));
    assert!(si_integrate(&kernels, &[0.2], Direction::Forward, x0.clone(), 0).is_err());
    assert!(si_integrate(&kernels, &[0.2, 0.1], Direction::Forward, x0.clone(), 0).is_err());
    assert!(si_integrate(&kernels, &[0.1, 0.2], Direction::Backward, x0, 0).is_err());
}

#[test]
fn tiny_mala_steps_are_always_accepted() {
    let target = GaussianMixture::standard_normal(3);
    let x0 = target.sample(200, &mut stream_rng(2, 0));
    let (_, acc) = mala_chain(&target, x0, 1e-4, 20, 1).unwrap();
    assert!(acc > 0.999, "{acc}");
}

#[test]
fn mala_samples_a_standard_normal() {
    let target = GaussianMixture::standard_normal(2);
    let n = 4000;
    let x0 = Array2::from_elem((n, 2), 3.0);
    let (states, acc) = mala_chain(&target, x0, 0.9, 200, 6).unwrap();
    assert!(acc > 0.5);
    let last = states.last().unwrap();
    for j in 0..2 {
        let col = column(last, j);
        assert!(mean(&col).abs() < 4.0 / (n as f64).sqrt(), "{}", mean(&col));
    }
}

#[test]
fn mala_leaves_its_target_invariant() {
    let target = GaussianMixture::isotropic(vec![1.0], arr2(&[[0.5, -1.0]]), 0.6).unwrap();
    let n = 3000;
    let x0 = target.sample(n, &mut stream_rng(7, 0));
    let (states, _) = mala_chain(&target, x0, 0.8, 50, 7).unwrap();
    let direct = target.sample(n, &mut stream_rng(7, 1));
    let ks = sliced_ks(states.last().unwrap().view(), direct.view(), 64, &mut stream_rng(7, 2)).unwrap();
    assert!(ks < ks_crit(n), "{ks}");
}

#[test]
fn mala_proposal_ratio_is_antisymmetric() {
    let target = GaussianMixture::isotropic(vec![0.3, 0.7], arr2(&[[1.0, 0.0], [-1.0, 2.0]]), 0.5).unwrap();
    let mut rng = stream_rng(9, 0);
    for _ in 0..50 {
        let x = arr1(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let y = arr1(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let step = rng.gen_range(0.05..1.5);
        let f = mala_log_proposal_ratio(&target, x.view(), y.view(), step).unwrap();
        let b = mala_log_proposal_ratio(&target, y.view(), x.view(), step).unwrap();
        assert!((f + b).abs() < 1e-12 * (1.0 + f.abs()), "{f} {b}");
    }
}

#[test]
fn ess_of_simple_weights() {
    assert!((ess(&[0.0; 64]) - 64.0).abs() < 1e-12);
    let mut w = vec![f64::NEG_INFINITY; 30];
    w[4] = -3.0;
    assert_eq!(ess(&w), 1.0);
    w[20] = -3.0;
    assert_eq!(ess(&w), 2.0);
}

proptest! {
    #[test]
    fn ess_ignores_a_common_shift(w in prop::collection::vec(-20.0..20.0f64, 1..50), c in -500.0..500.0f64) {
        let shifted: Vec<f64> = w.iter().map(|v| v + c).collect();
        let (a, b) = (ess(&w), ess(&shifted));
        prop_assert!((a - b).abs() < 1e-12 * a);
        prop_assert!(a >= 1.0 - 1e-12 && a <= w.len() as f64 + 1e-12);
    }
}

#[test]
fn resampling_one_hot_copies_the_hot_particle() {
    let pos = Array2::from_shape_fn((16, 2), |(i, j)| (i * 2 + j) as f64);
    let mut sys = ParticleSystem::new(pos, 5);
    sys.log_weights = vec![f64::NEG_INFINITY; 16];
    sys.log_weights[11] = 4.0;
    multinomial_resample(&mut sys).unwrap();
    for row in sys.positions.rows() {
        assert_eq!(row.to_vec(), vec![22.0, 23.0]);
    }
    assert_eq!(sys.normalized_weights().iter().sum::<f64>(), 1.0);
}

#[test]
fn uniform_resampling_keeps_the_expected_fraction() {
    let n = 100;
    let reps = 400;
    let expected = 1.0 - (1.0 - 1.0 / n as f64).powi(n as i32);
    let fractions: Vec<f64> = (0..reps)
        .map(|r| {
            let pos = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
            let mut sys = ParticleSystem::new(pos, r as u64);
            multinomial_resample(&mut sys).unwrap();
            let mut seen = vec![false; n];
            sys.positions.iter().for_each(|v| seen[*v as usize] = true);
            seen.iter().filter(|s| **s).count() as f64 / n as f64
        })
        .collect();
    let se = (variance(&fractions) / reps as f64).sqrt();
    assert!((mean(&fractions) - expected).abs() < 4.0 * se, "{} vs {expected}", mean(&fractions));
}

#[test]
fn resampling_vanished_weights_fails() {
    let mut sys = ParticleSystem::new(Array2::zeros((4, 1)), 0);
    sys.log_weights = vec![f64::NEG_INFINITY; 4];
    assert!(multinomial_resample(&mut sys).is_err());
}

#[test]
fn identical_levels_keep_uniform_weights() {
    let m = GaussianMixture::mog2(2);
    let targets: Vec<&dyn Target> = vec![&m; 6];
    let x = m.sample(300, &mut stream_rng(3, 0));
    let r = smc_classic(&targets, ParticleSystem::new(x, 3), &SmcConfig::default()).unwrap();
    assert_eq!(r.n_resample, 0);
    assert!(r.system.log_weights.iter().all(|w| *w == 0.0));
    assert!(r.log_normalizer.abs() < 1e-12);
}

#[test]
fn geometric_smc_finds_the_shifted_gaussian() {
    let start = GaussianMixture::standard_normal(2);
    let m = arr1(&[1.5, -1.0]);
    let end = GaussianMixture::isotropic(vec![1.0], m.clone().insert_axis(Axis(0)), 1.0).unwrap();
    let k = 32;
    let levels: Vec<Geometric> = (0..=k)
        .map(|i| Geometric { a: &end, b: &start, beta: i as f64 / k as f64 })
        .collect();
    let targets: Vec<&dyn Target> = levels.iter().map(|g| g as &dyn Target).collect();
    let x = start.sample(2048, &mut stream_rng(12, 0));
    let cfg = SmcConfig { mala_steps: 16, ..SmcConfig::default() };
    let r = smc_classic(&targets, ParticleSystem::new(x, 12), &cfg).unwrap();
    let got = r.system.mean();
    let se = 1.0 / r.system.ess().sqrt();
    for j in 0..2 {
        assert!((got[j] - m[j]).abs() < 3.0 * se, "{got} vs {m}");
    }
    assert!(r.log_normalizer.abs() < 0.05, "{}", r.log_normalizer);
    assert!(r.acceptance.iter().all(|a| (0.4..1.0).contains(a)));
}

#[test]
fn smc_without_resampling_is_annealed_importance_sampling() {
    let a = GaussianMixture::isotropic(vec![0.5, 0.5], arr2(&[[-1.0], [2.0]]), 0.3).unwrap();
    let b = gauss_1d(0.0, 4.0);
    let levels: Vec<Geometric> = (0..3).map(|i| Geometric { a: &a, b: &b, beta: i as f64 / 2.0 }).collect();
    let targets: Vec<&dyn Target> = levels.iter().map(|g| g as &dyn Target).collect();
    let x = b.sample(500, &mut stream_rng(13, 0));
    let cfg = SmcConfig { alpha: 0.0, mala_steps: 4, record_levels: true, ..SmcConfig::default() };
    let r = smc_classic(&targets, ParticleSystem::new(x, 13), &cfg).unwrap();
    assert_eq!(r.n_resample, 0);
    assert_eq!(r.level_positions.len(), 2);
    let mut direct = vec![0.0; 500];
    for (pos, k) in r.level_positions.iter().zip([1usize, 0]) {
        let num = targets[k].log_density(pos.view()).unwrap();
        let den = targets[k + 1].log_density(pos.view()).unwrap();
        for i in 0..500 {
            direct[i] += num[i] - den[i];
        }
    }
    for (w, d) in r.system.log_weights.iter().zip(&direct) {
        assert!((w - d).abs() < 1e-12 * (1.0 + d.abs()), "{w} vs {d}");
    }
}

#[test]
fn smc_needs_two_levels() {
    let m = GaussianMixture::standard_normal(1);
    let targets: Vec<&dyn Target> = vec![&m];
    let x = Array2::zeros((4, 1));
    assert!(smc_classic(&targets, ParticleSystem::new(x, 0), &SmcConfig::default()).is_err());
}

struct DiffusionRun {
    n_resample: usize,
    min_ess: f64,
    weight_sd: f64,
}

fn run_diffusion_smc(true_fam: &MarginalFamily, energy_fam: &MarginalFamily, k: usize, mala: usize) -> DiffusionRun {
    let (lo, hi) = (1e-3, 1.0 - 1e-3);
    let grid = linspace(lo, hi, k + 1);
    let levels: Vec<AtTime<MarginalFamily>> = grid.iter().map(|t| AtTime { density: energy_fam, t: *t }).collect();
    let targets: Vec<&dyn Target> = levels.iter().map(|l| l as &dyn Target).collect();
    let kernels = SiKernels { velocity: true_fam, score: true_fam, amp: 1.0, g: 1e-2 };
    let n = 1000;
    let x = energy_fam.at(hi).unwrap().sample(n, &mut stream_rng(21, 0));
    let cfg = SmcConfig { mala_steps: mala, record_levels: true, ..SmcConfig::default() };
    let r = smc_diffusion(&targets, &grid, &kernels, ParticleSystem::new(x, 21), &cfg).unwrap();
    let spread = |w: &[f64]| {
        let m = mean(w);
        (w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w.len() as f64).sqrt()
    };
    DiffusionRun {
        n_resample: r.n_resample,
        min_ess: r.ess_history.iter().copied().fold(f64::INFINITY, f64::min) / n as f64,
        weight_sd: spread(&r.system.log_weights),
    }
}

#[test]
fn matched_gaussian_path_weights_shrink_with_the_step() {
    let fam = two_gaussians();
    let coarse = run_diffusion_smc(&fam, &fam, 128, 0);
    let fine = run_diffusion_smc(&fam, &fam, 512, 0);
    let ratio = coarse.weight_sd / fine.weight_sd;
    assert!((3.0..5.0).contains(&ratio), "{} -> {}", coarse.weight_sd, fine.weight_sd);
    assert!(fine.weight_sd < 0.1);
    assert_eq!(fine.n_resample, 0);
    assert!(fine.min_ess > 0.9, "{}", fine.min_ess);
}

fn four_modes(weights: Vec<f64>) -> MarginalFamily {
    let means = arr2(&[[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]]);
    MarginalFamily::Si {
        amp: 1.0,
        m0: GaussianMixture::isotropic(weights, means, 0.5).unwrap(),
        m1: GaussianMixture::standard_normal(2),
    }
}

#[test]
fn wrong_energies_trigger_more_resampling() {
    let truth = four_modes(vec![0.25; 4]);
    let wrong = four_modes(vec![0.97, 0.01, 0.01, 0.01]);
    let good = run_diffusion_smc(&truth, &truth, 512, 0);
    let bad = run_diffusion_smc(&truth, &wrong, 512, 0);
    assert!(bad.n_resample > good.n_resample, "{} vs {}", bad.n_resample, good.n_resample);
    assert!(bad.min_ess < good.min_ess);
}

#[test]
fn diffusion_smc_rejects_zero_noise() {
    let fam = two_gaussians();
    let grid = [0.2, 0.5];
    let levels: Vec<AtTime<MarginalFamily>> = grid.iter().map(|t| AtTime { density: &fam, t: *t }).collect();
    let targets: Vec<&dyn Target> = levels.iter().map(|l| l as &dyn Target).collect();
    let kernels = SiKernels { velocity: &fam, score: &fam, amp: 1.0, g: 0.0 };
    let sys = ParticleSystem::new(Array2::zeros((4, 1)), 0);
    assert!(smc_diffusion(&targets, &grid, &kernels, sys, &SmcConfig::default()).is_err());
}

#[test]
fn samplers_are_deterministic() {
    let target = GaussianMixture::mog2(2);
    let x0 = target.sample(64, &mut stream_rng(30, 0));
    let a = mala_chain(&target, x0.clone(), 0.3, 10, 30).unwrap();
    let b = mala_chain(&target, x0, 0.3, 10, 30).unwrap();
    assert_eq!(a.0.last(), b.0.last());
    let sched = NoisingSchedule::vp_default();
    let fam = MarginalFamily::Dm { sched, base: target };
    let grid = decreasing(1e-3, 1.0, 50);
    assert_eq!(
        dm_denoise(&fam, &sched, &grid, 32, 1).unwrap(),
        dm_denoise(&fam, &sched, &grid, 32, 1).unwrap()
    );
}
