use ebdl_core::density::{Flat, TimeOffset};
use ebdl_core::losses::*;
use ebdl_core::math::{logsumexp, stream_rng};
use ebdl_core::{EnergyModel, GaussianMixture, MarginalFamily, ModelSpec, NoisingSchedule, TimeDensity};
use ndarray::{arr2, Array2, ArrayView2};
use proptest::prelude::*;
use quadrature::double_exponential::integrate;

fn small_model(d: usize, seed: u64) -> EnergyModel {
    EnergyModel::new(ModelSpec { d, width: 16, depth: 3, m: 4 }, seed).unwrap()
}

fn zero_model(d: usize) -> EnergyModel {
    let mut m = small_model(d, 0);
    m.params_mut().iter_mut().for_each(|p| p.data.iter_mut().for_each(|v| *v = 0.0));
    m
}

fn vp() -> Process {
    Process::Dm(NoisingSchedule::vp_default())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn dsm_oracle_floor_matches_quadrature() {
    // Data on the two points +-1; the floor is E_x0 E_z (gamma s(y) + z)^2.
    let data = GaussianMixture::isotropic(vec![0.5, 0.5], arr2(&[[-1.0], [1.0]]), 1e-300).unwrap();
    let process = vp();
    let t = 0.3;
    let Process::Dm(sched) = process else { unreachable!() };
    let e = sched.eval(t).unwrap();
    let fam = MarginalFamily::Dm { sched, base: data.clone() };
    let marginal = fam.at(t).unwrap();
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let floor: f64 = [-1.0, 1.0]
        .iter()
        .map(|x0| {
            0.5 * integrate(
                |z| {
                    let y = e.s * x0 + e.gamma * z;
                    let s = marginal.score(ndarray::arr1(&[y]).view()).unwrap()[0];
                    (e.gamma * s + z).powi(2) * phi(z)
                },
                -12.0,
                12.0,
                1e-12,
            )
            .integral
        })
        .sum();
    let mut rng = stream_rng(4, 0);
    let n = 20_000;
    let x0 = Array2::from_shape_fn((n, 1), |(i, _)| if i % 2 == 0 { -1.0 } else { 1.0 });
    let z = ebdl_core::math::standard_normal(&mut rng, n, 1);
    let batch = process.noisy(&vec![t; n], x0.view(), None, z).unwrap();
    let y = batch.y();
    let per: Vec<f64> = (0..n)
        .map(|i| {
            let s = fam.score(t, y.row(i)).unwrap()[0];
            (e.gamma * s + batch.z[[i, 0]]).powi(2)
        })
        .collect();
    let mc = dsm_value_of(&fam, &batch).unwrap();
    let var = per.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mc - floor).abs() < 3.0 * (var / n as f64).sqrt(), "{mc} vs {floor}");
    assert!(floor > 0.0);
}

#[test]
fn dsm_is_zero_at_the_conditional_target() {
    let process = vp();
    let x0 = arr2(&[[0.4, -1.0]]);
    let z = arr2(&[[0.3, 0.9]]);
    let t = 0.2;
    let batch = process.noisy(&[t], x0.view(), None, z).unwrap();
    let cond = GaussianMixture::isotropic(vec![1.0], batch.anchor.clone(), batch.gamma[0].powi(2)).unwrap();
    let v = dsm_value_of(&MarginalFamily::Static(cond), &batch).unwrap();
    assert!(v < 1e-24);
}

#[test]
fn dsm_unchanged_by_duplication() {
    let m = small_model(2, 1);
    let mut rng = stream_rng(2, 0);
    let x0 = GaussianMixture::standard_normal(2).sample(16, &mut rng);
    let b = sample_noisy(&vp(), x0.view(), None, &mut rng).unwrap();
    let a = dsm_loss(&m, &b).unwrap().value;
    let c = dsm_loss(&m, &b.repeated(2)).unwrap().value;
    assert!(close(a, c, 1e-13));
    assert!(close(a, dsm_value_of(&m, &b).unwrap(), 1e-12));
}

fn clf_batch(n: usize, m: usize, seed: u64) -> ClfBatch {
    let mut rng = stream_rng(seed, 0);
    let fam = MarginalFamily::Dm {
        sched: NoisingSchedule::vp_default(),
        base: GaussianMixture::isotropic(vec![0.3, 0.7], arr2(&[[-1.0, 0.0], [1.0, 0.5]]), 0.2).unwrap(),
    };
    let times = sample_distinct_times(&mut rng, n, 1e-4);
    ClfBatch::from_family(&fam, times, m, &mut rng).unwrap()
}

#[test]
fn time_blind_model_gives_log_n() {
    let m = zero_model(2);
    for n in [2, 3, 5] {
        let b = clf_batch(n, 8, n as u64);
        assert!((diffclf_loss(&m, &b).unwrap().value - (n as f64).ln()).abs() < 1e-14);
        assert!((diffclf_value_of(&Flat { d: 2 }, &b).unwrap() - (n as f64).ln()).abs() < 1e-14);
    }
}

#[test]
fn classification_rejects_bad_batches() {
    let s = Array2::zeros((4, 2));
    assert!(ClfBatch::new(vec![0.3], vec![s.clone()]).is_err());
    assert!(ClfBatch::new(vec![0.3, 0.3], vec![s.clone(), s.clone()]).is_err());
    assert!(binary_clf_loss(&zero_model(2), 0.4, 0.4, &s, &s).is_err());
}

#[test]
fn graph_and_direct_classification_agree() {
    let m = small_model(2, 3);
    let b = clf_batch(4, 16, 7);
    assert!(close(diffclf_loss(&m, &b).unwrap().value, diffclf_value_of(&m, &b).unwrap(), 1e-12));
}

#[test]
fn binary_equals_two_class() {
    let m = small_model(2, 5);
    let b = clf_batch(2, 32, 9);
    let (t, t2) = (b.times[0], b.times[1]);
    let bin = binary_clf_loss(&m, t, t2, &b.samples[0], &b.samples[1]).unwrap();
    let two = diffclf_loss(&m, &b).unwrap();
    assert!(close(bin.value, two.value, 1e-12));
    let direct = binary_clf_value_of(&m, t, t2, b.samples[0].view(), b.samples[1].view()).unwrap();
    assert!(close(bin.value, direct, 1e-12));
}

#[test]
fn equal_densities_give_log_two() {
    let b = clf_batch(2, 8, 1);
    let v = binary_clf_loss(&zero_model(2), b.times[0], b.times[1], &b.samples[0], &b.samples[1]).unwrap();
    assert!((v.value - 2f64.ln()).abs() < 1e-15);
}

/// `log p_t(x) = k (t - 1/2) x_0`.
struct Tilted(f64);

impl TimeDensity for Tilted {
    fn dim(&self) -> usize {
        1
    }
    fn log_density(&self, t: f64, x: ArrayView2<f64>) -> ebdl_core::Result<Vec<f64>> {
        Ok(x.column(0).iter().map(|v| self.0 * (t - 0.5) * v).collect())
    }
    fn score(&self, t: f64, x: ArrayView2<f64>) -> ebdl_core::Result<Array2<f64>> {
        Ok(Array2::from_elem(x.raw_dim(), self.0 * (t - 0.5)))
    }
    fn time_derivative(&self, _t: f64, x: ArrayView2<f64>) -> ebdl_core::Result<Vec<f64>> {
        Ok(x.column(0).iter().map(|v| self.0 * v).collect())
    }
}

#[test]
fn perfect_separation_drives_loss_to_zero() {
    let ys = Array2::from_elem((4, 1), 1.0);
    let ys2 = Array2::from_elem((4, 1), -1.0);
    let mut last = f64::INFINITY;
    for k in [1.0, 10.0, 100.0] {
        let v = binary_clf_value_of(&Tilted(k), 0.9, 0.1, ys.view(), ys2.view()).unwrap();
        assert!(v > 0.0 && v < last);
        last = v;
    }
    assert!(last < 1e-30);
}

#[test]
fn bregman_identities() {
    let m = small_model(2, 8);
    let b = clf_batch(2, 16, 3);
    let (t, t2) = (b.times[0], b.times[1]);
    let bin = binary_clf_loss(&m, t, t2, &b.samples[0], &b.samples[1]).unwrap();
    let can = bregman_binary_loss(&m, Bregman::Canonical, t, t2, &b.samples[0], &b.samples[1]).unwrap();
    assert!(close(can.value, 2.0 * bin.value, 1e-12));
    let poly = bregman_binary_loss(&zero_model(2), Bregman::Poly, t, t2, &b.samples[0], &b.samples[1]).unwrap();
    assert!((poly.value + 0.5).abs() < 1e-15);
}

fn fd5(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

#[test]
fn bregman_generators_in_closed_form() {
    for phi in [Bregman::Canonical, Bregman::Poly, Bregman::Recip] {
        for r in [0.3, 1.0, 2.5] {
            let d1 = fd5(|v| phi.phi(v), r, 1e-3);
            let d2 = fd5(|v| phi.phi_prime(v), r, 1e-3);
            assert!((d1 - phi.phi_prime(r)).abs() < 1e-8 * (1.0 + d1.abs()));
            assert!((d2 - phi.phi_second(r)).abs() < 1e-6 * (1.0 + d2.abs()));
            assert!(phi.phi_second(r) > 0.0);
        }
    }
}

#[test]
fn ctsm_of_time_blind_model_is_mean_weighted_target() {
    let m = zero_model(2);
    let mut rng = stream_rng(6, 0);
    let x0 = GaussianMixture::standard_normal(2).sample(8, &mut rng);
    let b = sample_noisy(&vp(), x0.view(), None, &mut rng).unwrap().antithetic();
    let target = ctsm_target(&b);
    let direct: f64 = (0..b.len())
        .map(|i| (b.gamma[i] / b.gamma_dot[i]).powi(2) * target[i].powi(2))
        .sum::<f64>()
        / b.len() as f64;
    assert!(close(ctsm_loss(&m, &b).unwrap().value, direct, 1e-12));
}

#[test]
fn ctsm_target_at_the_anchor() {
    let process = vp();
    let d = 3;
    let b = process
        .noisy(&[0.4], Array2::zeros((1, d)).view(), None, Array2::zeros((1, d)))
        .unwrap();
    assert_eq!(ctsm_target(&b)[0], -(d as f64) * b.gamma_dot[0] / b.gamma[0]);
}

/// The posterior mean of the conditional time score is the exact time score.
#[test]
fn ctsm_target_is_unbiased_for_the_time_score() {
    let base = GaussianMixture::isotropic(vec![1.0], arr2(&[[0.7]]), 0.5).unwrap();
    let process = vp();
    let Process::Dm(sched) = process else { unreachable!() };
    let fam = MarginalFamily::Dm { sched, base: base.clone() };
    let t = 0.3;
    let e = sched.eval(t).unwrap();
    let n = 200_000;
    let x0 = base.sample(n, &mut stream_rng(12, 0));
    for y in [-0.5, 0.2, 1.0] {
        let z = Array2::from_shape_fn((n, 1), |(i, _)| (y - e.s * x0[[i, 0]]) / e.gamma);
        let b = process.noisy(&vec![t; n], x0.view(), None, z.clone()).unwrap();
        let target = ctsm_target(&b);
        let lw: Vec<f64> = z.column(0).iter().map(|z| -0.5 * z * z).collect();
        let lz = logsumexp(&lw);
        let est: f64 = lw.iter().zip(&target).map(|(l, v)| (l - lz).exp() * v).sum();
        let exact = fam.time_score(t, ndarray::arr1(&[y]).view()).unwrap();
        assert!((est - exact).abs() < 1e-2 * exact.abs().max(1.0), "y = {y}: {est} vs {exact}");
    }
}

#[test]
fn tsm_gap_identities() {
    let fam = MarginalFamily::Dm {
        sched: NoisingSchedule::vp_default(),
        base: GaussianMixture::standard_normal(2),
    };
    let t = 0.4;
    let x = fam.at(t).unwrap().sample(64, &mut stream_rng(1, 0));
    assert!(tsm_gap(&fam, &fam, t, x.view()).unwrap() < 1e-6);
    let shifted = TimeOffset { inner: &fam, offset: |s: f64| 1.5 * s * s, h: 1e-4 };
    let gap = tsm_gap(&shifted, &fam, t, x.view()).unwrap();
    assert!((gap - (3.0 * t).powi(2)).abs() < 1e-8);
    let lin = |c: f64| TimeOffset { inner: &fam, offset: move |s: f64| c * s, h: 1e-4 };
    let (g1, g2) = (tsm_gap(&lin(1.0), &fam, t, x.view()).unwrap(), tsm_gap(&lin(2.0), &fam, t, x.view()).unwrap());
    assert!((g2 / g1 - 4.0).abs() < 1e-6);
}

#[test]
fn joint_loss_composition() {
    let m = small_model(2, 2);
    let mut rng = stream_rng(3, 0);
    let x0 = GaussianMixture::standard_normal(2).sample(16, &mut rng);
    let dsm = sample_noisy(&vp(), x0.view(), None, &mut rng).unwrap();
    let clf = clf_batch(2, 8, 4);
    let only = joint_loss(&m, &JointBatch { dsm: Some(dsm.clone()), ..Default::default() }).unwrap();
    let alone = dsm_loss(&m, &dsm).unwrap();
    assert_eq!(only.value, alone.value);
    let both = joint_loss(&m, &JointBatch { dsm: Some(dsm.clone()), clf: Some(clf.clone()), ctsm: None }).unwrap();
    let c = diffclf_loss(&m, &clf).unwrap();
    assert!(close(both.value, alone.value + c.value, 1e-13));
    for ((g, a), b) in both.grads.iter().zip(&alone.grads).zip(&c.grads) {
        for ((x, y), z) in g.data.iter().zip(&a.data).zip(&b.data) {
            assert!((x - y - z).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }
    assert!(joint_loss(&m, &JointBatch::default()).is_err());
}

#[test]
fn every_loss_passes_the_gradient_check() {
    let m = small_model(3, 11);
    for loss in CheckedLoss::all() {
        let r = gradient_check(loss, &m, 5, 6, 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}: {}", r.loss, r.max_rel_err);
    }
}

/// Adds a fixed time-independent function of `x` to every time.
struct PlusStatic<'a> {
    inner: &'a EnergyModel,
    extra: &'a EnergyModel,
}

impl TimeDensity for PlusStatic<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn log_density(&self, t: f64, x: ArrayView2<f64>) -> ebdl_core::Result<Vec<f64>> {
        let a = TimeDensity::log_density(self.inner, t, x)?;
        let b = TimeDensity::log_density(self.extra, 0.5, x)?;
        Ok(a.iter().zip(&b).map(|(a, b)| a + b).collect())
    }
    fn score(&self, t: f64, x: ArrayView2<f64>) -> ebdl_core::Result<Array2<f64>> {
        Ok(TimeDensity::score(self.inner, t, x)? + TimeDensity::score(self.extra, 0.5, x)?)
    }
    fn time_derivative(&self, t: f64, x: ArrayView2<f64>) -> ebdl_core::Result<Vec<f64>> {
        TimeDensity::time_derivative(self.inner, t, x)
    }
}

#[test]
fn classification_ignores_time_independent_terms() {
    let (m, extra) = (small_model(2, 1), small_model(2, 99));
    let b = clf_batch(4, 32, 5);
    let a = diffclf_value_of(&m, &b).unwrap();
    let p = diffclf_value_of(&PlusStatic { inner: &m, extra: &extra }, &b).unwrap();
    assert!((a - p).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn classification_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..4) {
        let m = small_model(2, seed);
        let b = clf_batch(4, 8, seed);
        let n = b.n_classes();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pb = ClfBatch::new(
            perm.iter().map(|&i| b.times[i]).collect(),
            perm.iter().map(|&i| b.samples[i].clone()).collect(),
        ).unwrap();
        let (a, c) = (diffclf_loss(&m, &b).unwrap().value, diffclf_loss(&m, &pb).unwrap().value);
        prop_assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn classification_is_nonnegative(seed in 0u64..1000) {
        let m = small_model(2, seed);
        prop_assert!(diffclf_loss(&m, &clf_batch(3, 4, seed)).unwrap().value >= 0.0);
    }
}

