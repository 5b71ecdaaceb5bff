use ebdl_core::free_energy::{
    bar, energy_time_derivative, fep, fep_reverse, mbar_objective, mbar_solve, ti_estimate, trapezoid_weights,
    MbarProblem, PotentialPath, CSV_HEADER,
};
use ebdl_core::math::{linspace, standard_normal, stream_rng};
use ebdl_core::{Error, Result};
use ndarray::{Array2, ArrayView2, Axis};
use proptest::prelude::*;

/// Centred Gaussian potentials `|x|^2 / (2 s(t)^2)` on a path between
/// standard deviations `sa` and `sb`.
struct GaussPath {
    d: usize,
    sa: f64,
    sb: f64,
    /// Linear in the energy (precision interpolation) when true, linear in
    /// the standard deviation otherwise.
    energy_linear: bool,
}

impl GaussPath {
    fn precision(&self, t: f64) -> f64 {
        if self.energy_linear {
            (1.0 - t) / (self.sa * self.sa) + t / (self.sb * self.sb)
        } else {
            let s = self.sa + t * (self.sb - self.sa);
            1.0 / (s * s)
        }
    }

    fn exact(&self) -> f64 {
        self.d as f64 * (self.sb / self.sa).ln()
    }
}

impl PotentialPath for GaussPath {
    fn energy(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let p = self.precision(t);
        Ok(x.rows().into_iter().map(|r| 0.5 * p * r.dot(&r)).collect())
    }

    fn sample(&self, t: f64, n: usize, seed: u64) -> Result<Array2<f64>> {
        let sd = self.precision(t).sqrt().recip();
        Ok(standard_normal(&mut stream_rng(seed, 0x5a), n, self.d) * sd)
    }
}

fn path(d: usize) -> GaussPath {
    GaussPath { d, sa: 1.0, sb: 1.6, energy_linear: true }
}

fn endpoint_samples(p: &GaussPath, n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    (p.sample(0.0, n, seed).unwrap(), p.sample(1.0, n, seed + 1).unwrap())
}

#[test]
fn fep_of_identical_states_is_zero() {
    let u = vec![0.3, -1.0, 2.5, 7.0];
    let e = fep(&u, &u).unwrap();
    assert_eq!(e.delta_f, 0.0);
    assert_eq!(e.stderr, 0.0);
}

#[test]
fn fep_recovers_gaussian_free_energy() {
    for d in [1, 4] {
        let p = path(d);
        let (xa, xb) = endpoint_samples(&p, 40_000, 3);
        let fwd = fep(&p.energy(0.0, xa.view()).unwrap(), &p.energy(1.0, xa.view()).unwrap()).unwrap();
        assert!((fwd.delta_f - p.exact()).abs() < 3.0 * fwd.stderr, "{fwd:?} vs {}", p.exact());
        let rev = fep_reverse(&p.energy(0.0, xb.view()).unwrap(), &p.energy(1.0, xb.view()).unwrap()).unwrap();
        assert!((rev.delta_f - p.exact()).abs() < 3.0 * rev.stderr, "{rev:?}");
    }
}

#[test]
fn fep_is_antisymmetric() {
    let p = path(2);
    let (xa, xb) = endpoint_samples(&p, 40_000, 5);
    let ab = fep(&p.energy(0.0, xa.view()).unwrap(), &p.energy(1.0, xa.view()).unwrap()).unwrap();
    let ba = fep(&p.energy(1.0, xb.view()).unwrap(), &p.energy(0.0, xb.view()).unwrap()).unwrap();
    let se = (ab.stderr.powi(2) + ba.stderr.powi(2)).sqrt();
    assert!((ab.delta_f + ba.delta_f).abs() < 3.0 * se);
}

#[test]
fn fep_rejects_mismatched_inputs() {
    assert!(fep(&[1.0, 2.0], &[1.0]).is_err());
    assert!(fep(&[], &[]).is_err());
}

#[test]
fn trapezoid_integrates_linear_functions_exactly() {
    let grid = [0.0, 0.1, 0.35, 0.6, 1.0];
    let w = trapezoid_weights(&grid);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    let integral: f64 = w.iter().zip(&grid).map(|(w, t)| w * (3.0 * t - 1.0)).sum();
    assert!((integral - 0.5).abs() < 1e-15);
}

#[test]
fn time_derivative_stencils_are_second_order() {
    let p = GaussPath { d: 1, sa: 1.0, sb: 2.0, energy_linear: false };
    let x = Array2::from_elem((1, 1), 1.3);
    let exact = |t: f64| {
        let s = 1.0 + t;
        -1.3f64 * 1.3 / (s * s * s)
    };
    for t in [0.0, 0.5, 1.0] {
        let err = |h: f64| (energy_time_derivative(&p, t, x.view(), h).unwrap()[0] - exact(t)).abs();
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..4.5).contains(&ratio), "t={t} ratio {ratio}");
    }
}

struct Flat;

impl PotentialPath for Flat {
    fn energy(&self, _t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(x.rows().into_iter().map(|r| 0.5 * r.dot(&r)).collect())
    }

    fn sample(&self, _t: f64, n: usize, seed: u64) -> Result<Array2<f64>> {
        Ok(standard_normal(&mut stream_rng(seed, 1), n, 2))
    }
}

#[test]
fn ti_of_a_constant_path_is_zero() {
    let x = Flat.sample(0.0, 100, 1).unwrap();
    let u = |x: ArrayView2<f64>| Flat.energy(0.0, x);
    let e = ti_estimate(&Flat, &u, x.view(), &u, x.view(), &linspace(0.0, 1.0, 8), 50, 1e-3, 2).unwrap();
    assert!(e.delta_f.abs() < 1e-12);
    assert_eq!(e.grid, 8);
}

fn ti_on(p: &GaussPath, n_ends: usize, n_per_t: usize, h: f64, seed: u64) -> ebdl_core::free_energy::Estimate {
    let (xa, xb) = endpoint_samples(p, n_ends, seed);
    let ua = |x: ArrayView2<f64>| p.energy(0.0, x);
    let ub = |x: ArrayView2<f64>| p.energy(1.0, x);
    ti_estimate(p, &ua, xa.view(), &ub, xb.view(), &linspace(0.0, 1.0, 64), n_per_t, h, seed + 10).unwrap()
}

#[test]
fn ti_recovers_gaussian_free_energy() {
    for d in [1, 3, 8] {
        let p = path(d);
        let e = ti_on(&p, 2000, 4000, 1e-3, 20 + d as u64);
        assert!((e.delta_f - p.exact()).abs() < 3.0 * e.stderr, "d={d}: {e:?} vs {}", p.exact());
    }
}

#[test]
fn ti_step_halving_is_second_order() {
    let p = GaussPath { d: 2, sa: 1.0, sb: 2.0, energy_linear: false };
    let est = |h: f64| ti_on(&p, 500, 500, h, 40).delta_f;
    let (a, b, c) = (est(4e-2), est(2e-2), est(1e-2));
    let ratio = (a - b) / (b - c);
    assert!((3.0..5.0).contains(&ratio), "{a} {b} {c}");
}

#[test]
fn ti_rejects_bad_grids() {
    let x = Flat.sample(0.0, 10, 1).unwrap();
    let u = |x: ArrayView2<f64>| Flat.energy(0.0, x);
    let run = |g: &[f64]| ti_estimate(&Flat, &u, x.view(), &u, x.view(), g, 10, 1e-3, 0);
    assert!(run(&[0.0]).is_err());
    assert!(run(&[0.0, 0.5]).is_err());
    assert!(run(&[0.0, 0.6, 0.4, 1.0]).is_err());
}

/// Pooled samples from states on the path at `times`, `n` per state.
fn mbar_problem(p: &GaussPath, times: &[f64], n: usize, seed: u64) -> MbarProblem {
    let views: Vec<Array2<f64>> = times
        .iter()
        .enumerate()
        .map(|(k, t)| p.sample(*t, n, seed + k as u64).unwrap())
        .collect();
    let pooled = ndarray::concatenate(Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>()).unwrap();
    let mut energies = Array2::zeros((times.len(), pooled.nrows()));
    for (k, t) in times.iter().enumerate() {
        let e = p.energy(*t, pooled.view()).unwrap();
        energies.row_mut(k).assign(&ndarray::Array1::from(e));
    }
    MbarProblem::new(energies, vec![n; times.len()]).unwrap()
}

#[test]
fn mbar_of_identical_states_is_zero() {
    let p = path(2);
    let prob = mbar_problem(&p, &[0.4, 0.4, 0.4], 200, 1);
    let s = mbar_solve(&prob, 1e-12, 1000).unwrap();
    assert!(s.f.iter().all(|f| f.abs() < 1e-12), "{:?}", s.f);
}

#[test]
fn mbar_recovers_gaussian_free_energy() {
    for d in [1, 4, 8] {
        let p = path(d);
        let prob = mbar_problem(&p, &linspace(0.0, 1.0, 5), 2000, 50 + d as u64);
        let s = mbar_solve(&prob, 1e-10, 10_000).unwrap();
        assert_eq!(s.f[0], 0.0);
        let (est, se) = (s.delta_f(0, 4), s.delta_f_stderr(0, 4));
        assert!(se > 0.0 && se < 0.1);
        assert!((est - p.exact()).abs() < 3.0 * se, "d={d}: {est} +- {se} vs {}", p.exact());
    }
}

#[test]
fn mbar_is_gauge_invariant() {
    let p = path(3);
    let prob = mbar_problem(&p, &linspace(0.0, 1.0, 4), 300, 9);
    let base = mbar_solve(&prob, 1e-12, 10_000).unwrap();
    let shifted = MbarProblem::new(prob.energies.mapv(|u| u + 123.4), prob.counts.clone()).unwrap();
    let s = mbar_solve(&shifted, 1e-12, 10_000).unwrap();
    for (a, b) in base.f.iter().zip(&s.f) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    let per_state = [0.0, 1.5, -2.0, 0.25];
    let mut e = prob.energies.clone();
    for (k, c) in per_state.iter().enumerate() {
        e.row_mut(k).mapv_inplace(|u| u + c);
    }
    let s = mbar_solve(&MbarProblem::new(e, prob.counts.clone()).unwrap(), 1e-12, 10_000).unwrap();
    for k in 0..4 {
        assert!((s.f[k] - base.f[k] - per_state[k]).abs() < 1e-10);
    }
}

#[test]
fn mbar_objective_never_increases() {
    let p = GaussPath { d: 2, sa: 0.7, sb: 2.5, energy_linear: true };
    let prob = mbar_problem(&p, &linspace(0.0, 1.0, 6), 150, 13);
    let s = mbar_solve(&prob, 1e-12, 10_000).unwrap();
    let start = mbar_objective(&prob, &[0.0; 6]);
    assert!(s.objective_trace[0] <= start + 1e-12);
    for w in s.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn mbar_reports_non_convergence() {
    let p = path(2);
    let prob = mbar_problem(&p, &linspace(0.0, 1.0, 3), 100, 4);
    assert!(matches!(mbar_solve(&prob, 1e-14, 2), Err(Error::Convergence { iterations: 2, .. })));
}

#[test]
fn mbar_problem_validation() {
    assert!(MbarProblem::new(Array2::zeros((2, 5)), vec![2, 2]).is_err());
    assert!(MbarProblem::new(Array2::zeros((2, 4)), vec![4, 0]).is_err());
    assert!(MbarProblem::new(Array2::zeros((3, 4)), vec![2, 2]).is_err());
    let mut bad = Array2::zeros((2, 4));
    bad[[1, 2]] = f64::NAN;
    assert!(MbarProblem::new(bad, vec![2, 2]).is_err());
}

#[test]
fn two_state_mbar_agrees_with_bar() {
    let p = path(3);
    let prob = mbar_problem(&p, &[0.0, 1.0], 5000, 77);
    let s = mbar_solve(&prob, 1e-12, 10_000).unwrap();
    let n = 5000;
    let w_f: Vec<f64> = (0..n).map(|j| prob.energies[[1, j]] - prob.energies[[0, j]]).collect();
    let w_r: Vec<f64> = (n..2 * n).map(|j| prob.energies[[0, j]] - prob.energies[[1, j]]).collect();
    let b = bar(&w_f, &w_r).unwrap();
    // Both solve the same two-state balance equation on the same data.
    assert!((b.delta_f - s.delta_f(0, 1)).abs() < 1e-8, "{} vs {}", b.delta_f, s.delta_f(0, 1));
    let se = (b.stderr.powi(2) + s.delta_f_stderr(0, 1).powi(2)).sqrt();
    assert!((b.delta_f - p.exact()).abs() < 3.0 * se);
    assert!((b.stderr / s.delta_f_stderr(0, 1) - 1.0).abs() < 0.2);
}

#[test]
fn ti_and_mbar_agree_on_the_linear_path() {
    let p = path(4);
    let ti = ti_on(&p, 3000, 3000, 1e-3, 90);
    let prob = mbar_problem(&p, &linspace(0.0, 1.0, 8), 1500, 91);
    let s = mbar_solve(&prob, 1e-10, 10_000).unwrap();
    let se = (ti.stderr.powi(2) + s.delta_f_stderr(0, 7).powi(2)).sqrt();
    assert!((ti.delta_f - s.delta_f(0, 7)).abs() < 3.0 * se, "{} vs {}", ti.delta_f, s.delta_f(0, 7));
}

#[test]
fn estimates_serialize_to_csv_rows() {
    let e = fep(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
    let row = e.to_csv();
    assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
    assert!(row.starts_with("fep,"));
}

proptest! {
    #[test]
    fn fep_of_a_constant_shift_is_exact(u in prop::collection::vec(-50.0..50.0f64, 1..40), c in -30.0..30.0f64) {
        let ub: Vec<f64> = u.iter().map(|v| v + c).collect();
        let e = fep(&u, &ub).unwrap();
        prop_assert!((e.delta_f + c).abs() < 1e-12 * (1.0 + c.abs()));
    }

    #[test]
    fn bar_is_antisymmetric(wf in prop::collection::vec(-5.0..5.0f64, 2..30), wr in prop::collection::vec(-5.0..5.0f64, 2..30)) {
        let ab = bar(&wf, &wr).unwrap();
        let ba = bar(&wr, &wf).unwrap();
        prop_assert!((ab.delta_f + ba.delta_f).abs() < 1e-9);
    }
}
