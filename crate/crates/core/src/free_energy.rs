//! Free-energy differences `Delta F_AB = log Z_B - log Z_A` for densities
//! `exp(-U)`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::math::logsumexp;

/// An estimate with its standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub estimator: String,
    pub delta_f: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub grid: usize,
}

pub const CSV_HEADER: &str = "estimator,delta_f,stderr,n_samples,grid";

impl Estimate {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.estimator, self.delta_f, self.stderr, self.n_samples, self.grid
        )
    }
}

/// `log mean exp(a)` with its jackknife standard error.
fn log_mean_exp_jackknife(a: &[f64]) -> (f64, f64) {
    let n = a.len();
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let est = m + (s / n as f64).ln();
    if n < 2 {
        return (est, f64::NAN);
    }
    let loo: Vec<f64> = e
        .iter()
        .map(|ei| m + ((s - ei).max(0.0) / (n - 1) as f64).ln())
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var = (n - 1) as f64 / n as f64 * loo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (est, var.sqrt())
}

/// Exponential reweighting from samples of `A`: `log E_A[exp(U_A - U_B)]`.
pub fn fep(u_a: &[f64], u_b: &[f64]) -> Result<Estimate> {
    if u_a.len() != u_b.len() || u_a.is_empty() {
        return Err(Error::dims(u_a.len(), u_b.len()));
    }
    let diff: Vec<f64> = u_a.iter().zip(u_b).map(|(a, b)| a - b).collect();
    let (delta_f, stderr) = log_mean_exp_jackknife(&diff);
    Ok(Estimate {
        estimator: "fep".into(),
        delta_f,
        stderr,
        n_samples: u_a.len(),
        grid: 0,
    })
}

/// The same difference estimated from samples of `B`:
/// `-log E_B[exp(U_B - U_A)]`.
pub fn fep_reverse(u_a: &[f64], u_b: &[f64]) -> Result<Estimate> {
    let mut e = fep(u_b, u_a)?;
    e.delta_f = -e.delta_f;
    e.estimator = "fep_reverse".into();
    Ok(e)
}

/// A family of potentials `U(t, x)` on `[0, 1]` with samples of
/// `exp(-U(t, .))`.
pub trait PotentialPath: Sync {
    fn energy(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>>;
    fn sample(&self, t: f64, n: usize, seed: u64) -> Result<Array2<f64>>;
}

pub type EnergyFn<'a> = &'a (dyn Fn(ArrayView2<f64>) -> Result<Vec<f64>> + Sync);

/// Trapezoid weights for a sorted grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let h = grid[k + 1] - grid[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

/// `d/dt U(t, x)` by finite differences: central inside `[h, 1 - h]`,
/// second-order one-sided at the ends.
pub fn energy_time_derivative(path: &dyn PotentialPath, t: f64, x: ArrayView2<f64>, h: f64) -> Result<Vec<f64>> {
    let comb = |pts: &[(f64, f64)]| -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.nrows()];
        for (dt, c) in pts {
            let e = path.energy(t + dt, x)?;
            out.iter_mut().zip(e).for_each(|(o, v)| *o += c * v / h);
        }
        Ok(out)
    };
    if t - h >= 0.0 && t + h <= 1.0 {
        comb(&[(h, 0.5), (-h, -0.5)])
    } else if t - h < 0.0 {
        comb(&[(0.0, -1.5), (h, 2.0), (2.0 * h, -0.5)])
    } else {
        comb(&[(0.0, 1.5), (-h, -2.0), (-2.0 * h, 0.5)])
    }
}

/// Thermodynamic integration along `path` with FEP corrections to the end
/// states: `FEP(A -> U_0) - int E_t[dU/dt] dt + FEP(U_1 -> B)`.
#[allow(clippy::too_many_arguments)]
pub fn ti_estimate(
    path: &dyn PotentialPath,
    u_a: EnergyFn,
    samples_a: ArrayView2<f64>,
    u_b: EnergyFn,
    samples_b: ArrayView2<f64>,
    grid: &[f64],
    n_per_t: usize,
    h: f64,
    seed: u64,
) -> Result<Estimate> {
    if grid.len() < 2 {
        return Err(Error::domain("integration grid needs at least two points"));
    }
    if !grid.windows(2).all(|w| w[1] > w[0]) || grid[0] != 0.0 || grid[grid.len() - 1] != 1.0 {
        return Err(Error::domain("integration grid must increase from 0 to 1"));
    }
    let head = fep(&u_a(samples_a)?, &path.energy(0.0, samples_a)?)?;
    let tail = fep_reverse(&path.energy(1.0, samples_b)?, &u_b(samples_b)?)?;
    let w = trapezoid_weights(grid);
    let mut integral = 0.0;
    let mut var = 0.0;
    for (k, t) in grid.iter().enumerate() {
        let x = path.sample(*t, n_per_t, seed.wrapping_add(k as u64))?;
        let du = energy_time_derivative(path, *t, x.view(), h)?;
        let n = du.len() as f64;
        let mean = du.iter().sum::<f64>() / n;
        let v = du.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        integral += w[k] * mean;
        var += w[k] * w[k] * v / n;
    }
    Ok(Estimate {
        estimator: "ti".into(),
        delta_f: head.delta_f - integral + tail.delta_f,
        stderr: (head.stderr.powi(2) + var + tail.stderr.powi(2)).sqrt(),
        n_samples: samples_a.nrows() + samples_b.nrows() + n_per_t * grid.len(),
        grid: grid.len(),
    })
}

/// Reduced energies of all pooled samples under every state.
#[derive(Clone, Debug, PartialEq)]
pub struct MbarProblem {
    /// `energies[[k, j]] = U_k(y_j)` over the pooled samples `y_j`.
    pub energies: Array2<f64>,
    /// Samples drawn from each state, in pooling order.
    pub counts: Vec<usize>,
}

impl MbarProblem {
    pub fn new(energies: Array2<f64>, counts: Vec<usize>) -> Result<Self> {
        if energies.nrows() != counts.len() {
            return Err(Error::dims(counts.len(), energies.nrows()));
        }
        if counts.iter().sum::<usize>() != energies.ncols() {
            return Err(Error::dims(counts.iter().sum(), energies.ncols()));
        }
        if counts.iter().any(|c| *c == 0) {
            return Err(Error::domain("every state needs at least one sample"));
        }
        if energies.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("MBAR energy matrix"));
        }
        Ok(Self { energies, counts })
    }

    pub fn n_states(&self) -> usize {
        self.counts.len()
    }

    /// `log sum_k N_k exp(F_k - U_k(y_j))` for every pooled sample.
    fn log_denominators(&self, f: &[f64]) -> Vec<f64> {
        let k = self.n_states();
        let ln_n: Vec<f64> = self.counts.iter().map(|c| (*c as f64).ln()).collect();
        (0..self.energies.ncols())
            .map(|j| {
                let terms: Vec<f64> = (0..k).map(|s| ln_n[s] + f[s] - self.energies[[s, j]]).collect();
                logsumexp(&terms)
            })
            .collect()
    }
}

/// Free energies `F_k = -log Z_k + log Z_1` (so `F_1 = 0`) with their
/// asymptotic covariance.
#[derive(Clone, Debug)]
pub struct MbarSolution {
    pub f: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    /// Objective value after each iteration.
    pub objective_trace: Vec<f64>,
}

impl MbarSolution {
    /// `Delta F_ij = log Z_j - log Z_i`.
    pub fn delta_f(&self, i: usize, j: usize) -> f64 {
        self.f[i] - self.f[j]
    }

    pub fn delta_f_stderr(&self, i: usize, j: usize) -> f64 {
        let c = &self.covariance;
        (c[(i, i)] + c[(j, j)] - 2.0 * c[(i, j)]).max(0.0).sqrt()
    }
}

/// Negative mean log-probability of each sample's own state under the
/// softmax over states.
pub fn mbar_objective(problem: &MbarProblem, f: &[f64]) -> f64 {
    let k = problem.n_states();
    let mut total = 0.0;
    let mut j = 0;
    for (state, &count) in problem.counts.iter().enumerate() {
        let mut acc = 0.0;
        for _ in 0..count {
            let logits: Vec<f64> = (0..k).map(|s| f[s] - problem.energies[[s, j]]).collect();
            acc += logsumexp(&logits) - logits[state];
            j += 1;
        }
        total += acc / count as f64;
    }
    total / k as f64
}

/// Self-consistent MBAR iteration
/// `F_k <- -log sum_j exp(-U_k(y_j)) / sum_s N_s exp(F_s - U_s(y_j))`.
pub fn mbar_solve(problem: &MbarProblem, tol: f64, max_iter: usize) -> Result<MbarSolution> {
    let k = problem.n_states();
    let n = problem.energies.ncols();
    let mut f = vec![0.0; k];
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let den = problem.log_denominators(&f);
        let mut next: Vec<f64> = (0..k)
            .map(|s| {
                let terms: Vec<f64> = (0..n).map(|j| -problem.energies[[s, j]] - den[j]).collect();
                -logsumexp(&terms)
            })
            .collect();
        let f0 = next[0];
        next.iter_mut().for_each(|v| *v -= f0);
        residual = next.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        f = next;
        trace.push(mbar_objective(problem, &f));
        if residual < tol {
            let covariance = mbar_covariance(problem, &f);
            return Ok(MbarSolution {
                f,
                covariance,
                iterations: it,
                objective_trace: trace,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

/// Asymptotic covariance of the free energies,
/// `Theta = V S (I - S V^T N V S)^+ S V^T` from the thin SVD `W = U S V^T`
/// of the weight matrix.
fn mbar_covariance(problem: &MbarProblem, f: &[f64]) -> DMatrix<f64> {
    let k = problem.n_states();
    let n = problem.energies.ncols();
    let den = problem.log_denominators(f);
    let w = DMatrix::from_fn(n, k, |j, s| (f[s] - problem.energies[[s, j]] - den[j]).exp());
    let svd = w.svd(false, true);
    let v = svd.v_t.expect("requested").transpose();
    let s = DMatrix::from_diagonal(&svd.singular_values);
    let counts = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        problem.counts.iter().map(|c| *c as f64),
    ));
    let vs = &v * &s;
    let inner = DMatrix::identity(k, k) - vs.transpose() * &counts * &vs;
    let eig = inner.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let inv_vals = eig
        .eigenvalues
        .map(|l| if l.abs() > 1e-10 * scale.max(1e-300) { 1.0 / l } else { 0.0 });
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    &vs * pinv * vs.transpose()
}

/// Two-state Bennett acceptance ratio from forward and reverse work values
/// `w_f = U_B - U_A` on A samples and `w_r = U_A - U_B` on B samples.
/// Returns `log Z_B - log Z_A`.
pub fn bar(w_f: &[f64], w_r: &[f64]) -> Result<Estimate> {
    if w_f.is_empty() || w_r.is_empty() {
        return Err(Error::domain("BAR needs samples from both states"));
    }
    let (nf, nr) = (w_f.len() as f64, w_r.len() as f64);
    let m = (nf / nr).ln();
    let fermi = |x: f64| 1.0 / (1.0 + x.exp());
    // Root in `df` (= F_B - F_A = -(log Z_B - log Z_A)) of a monotone
    // balance function.
    let balance = |df: f64| -> f64 {
        let a: f64 = w_f.iter().map(|w| fermi(m + w - df)).sum();
        let b: f64 = w_r.iter().map(|w| fermi(-m + w + df)).sum();
        a - b
    };
    let guess = -fep(&vec![0.0; w_f.len()], w_f)?.delta_f;
    let (mut lo, mut hi) = (guess - 1.0, guess + 1.0);
    let mut widen = 0;
    while balance(lo) > 0.0 || balance(hi) < 0.0 {
        lo -= 2f64.powi(widen);
        hi += 2f64.powi(widen);
        widen += 1;
        if widen > 60 {
            return Err(Error::Convergence {
                iterations: widen as usize,
                residual: f64::NAN,
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let df = 0.5 * (lo + hi);
    let moments = |vals: Vec<f64>| {
        let n = vals.len() as f64;
        let m1 = vals.iter().sum::<f64>() / n;
        let m2 = vals.iter().map(|v| v * v).sum::<f64>() / n;
        (m2 / (m1 * m1) - 1.0) / n
    };
    let var = moments(w_f.iter().map(|w| fermi(m + w - df)).collect())
        + moments(w_r.iter().map(|w| fermi(-m + w + df)).collect());
    Ok(Estimate {
        estimator: "bar".into(),
        delta_f: -df,
        stderr: var.max(0.0).sqrt(),
        n_samples: w_f.len() + w_r.len(),
        grid: 2,
    })
}
