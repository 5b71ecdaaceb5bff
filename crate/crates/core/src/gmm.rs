//! Diagonal Gaussian mixtures and their exact marginals under noising.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::{logsumexp, stream_rng, LN_2PI};
use crate::schedules::{si_gamma, si_gamma_value, NoisingSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Array2<f64>,
    vars: Array2<f64>,
    log_norm: Vec<f64>,
}

impl GaussianMixture {
    /// Weights must be non-negative and sum to one within `1e-12`; a zero
    /// weight switches a component off.
    pub fn new(weights: Vec<f64>, means: Array2<f64>, vars: Array2<f64>) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::domain("mixture needs at least one component"));
        }
        if means.nrows() != n || vars.nrows() != n {
            return Err(Error::dims(n, means.nrows().min(vars.nrows())));
        }
        if means.ncols() != vars.ncols() || means.ncols() == 0 {
            return Err(Error::dims(means.ncols(), vars.ncols()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::domain("mixture weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("mixture weights sum to {total}, not 1")));
        }
        if vars.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::domain("mixture variances must be finite and > 0"));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("mixture means must be finite"));
        }
        let d = means.ncols() as f64;
        let log_norm = weights
            .iter()
            .zip(vars.rows())
            .map(|(w, v)| w.ln() - 0.5 * (d * LN_2PI + v.iter().map(|x| x.ln()).sum::<f64>()))
            .collect();
        Ok(Self {
            weights,
            means,
            vars,
            log_norm,
        })
    }

    /// Isotropic components sharing one variance.
    pub fn isotropic(weights: Vec<f64>, means: Array2<f64>, var: f64) -> Result<Self> {
        let vars = Array2::from_elem(means.raw_dim(), var);
        Self::new(weights, means, vars)
    }

    pub fn standard_normal(d: usize) -> Self {
        Self::isotropic(vec![1.0], Array2::zeros((1, d)), 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn vars(&self) -> &Array2<f64> {
        &self.vars
    }

    fn check(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dims(self.dim(), x.len()));
        }
        Ok(())
    }

    /// Per-component `log w_n + log N(x; mu_n, v_n)`.
    fn component_log_joint(&self, x: ArrayView1<f64>, out: &mut [f64]) {
        for (n, o) in out.iter_mut().enumerate() {
            let mut q = 0.0;
            for ((xi, mi), vi) in x.iter().zip(self.means.row(n)).zip(self.vars.row(n)) {
                let r = xi - mi;
                q += r * r / vi;
            }
            *o = self.log_norm[n] - 0.5 * q;
        }
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check(x)?;
        let mut buf = vec![0.0; self.n_components()];
        self.component_log_joint(x, &mut buf);
        Ok(logsumexp(&buf))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut buf = vec![0.0; self.n_components()];
        self.component_log_joint(x, &mut buf);
        let lse = logsumexp(&buf);
        Ok(buf.iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn score(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let r = self.responsibilities(x)?;
        let mut s = Array1::zeros(self.dim());
        for (n, rn) in r.iter().enumerate() {
            if *rn == 0.0 {
                continue;
            }
            for j in 0..self.dim() {
                s[j] -= rn * (x[j] - self.means[[n, j]]) / self.vars[[n, j]];
            }
        }
        Ok(s)
    }

    pub fn log_density_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<f64>> {
        xs.rows().into_iter().map(|x| self.log_density(x)).collect()
    }

    pub fn score_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(xs.raw_dim());
        for (i, x) in xs.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.score(x)?);
        }
        Ok(out)
    }

    /// `n` draws: a categorical component index, then a diagonal Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let (x, _) = self.sample_labeled(n, rng);
        x
    }

    /// Samples together with their component labels.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let d = self.dim();
        let cat = WeightedIndex::new(&self.weights).expect("weights validated");
        let mut out = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = cat.sample(rng);
            labels.push(k);
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                out[[i, j]] = self.means[[k, j]] + self.vars[[k, j]].sqrt() * z;
            }
        }
        (out, labels)
    }

    /// Overall mean and per-coordinate standard deviation.
    pub fn moments(&self) -> (Array1<f64>, Array1<f64>) {
        let d = self.dim();
        let mut mean = Array1::zeros(d);
        let mut second = Array1::zeros(d);
        for (n, w) in self.weights.iter().enumerate() {
            for j in 0..d {
                let m = self.means[[n, j]];
                mean[j] += w * m;
                second[j] += w * (self.vars[[n, j]] + m * m);
            }
        }
        let std = (&second - &mean.mapv(|m| m * m)).mapv(f64::sqrt);
        (mean, std)
    }

    /// The image of the mixture under `x -> (x - mean) / std`, with the
    /// population mean and std used for the map.
    pub fn standardized(&self) -> (GaussianMixture, Array1<f64>, Array1<f64>) {
        let (mean, std) = self.moments();
        let means = (&self.means - &mean.view().insert_axis(Axis(0))) / &std.view().insert_axis(Axis(0));
        let vars = &self.vars / &std.mapv(|s| s * s).view().insert_axis(Axis(0));
        let m = GaussianMixture::new(self.weights.clone(), means, vars).expect("affine image is valid");
        (m, mean, std)
    }

    /// 40 equally weighted modes with means uniform on `[-40, 40]^d` and
    /// variance `log(1 + e)`.
    pub fn mog40(d: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let means = Array2::from_shape_fn((40, d), |_| rng.gen_range(-40.0..40.0));
        Self::isotropic(vec![1.0 / 40.0; 40], means, (1.0 + std::f64::consts::E).ln())
            .expect("valid")
    }

    /// Two modes at `+-5 * ones(d)` with weights 2/3 and 1/3 and variance 0.05.
    pub fn mog2(d: usize) -> Self {
        let means = Array2::from_shape_fn((2, d), |(i, _)| if i == 0 { -5.0 } else { 5.0 });
        Self::isotropic(vec![2.0 / 3.0, 1.0 / 3.0], means, 0.05).expect("valid")
    }

    /// The two 2-D mixtures used for composition experiments: `A` lives on
    /// the upper half plane, `B` on the lower one, with mirrored weights.
    pub fn composition_pair(a: f64, var: f64) -> (Self, Self) {
        let ma = ndarray::arr2(&[[-a, a], [a, a]]);
        let mb = ndarray::arr2(&[[-a, -a], [a, -a]]);
        (
            Self::isotropic(vec![0.3, 0.7], ma, var).expect("valid"),
            Self::isotropic(vec![0.7, 0.3], mb, var).expect("valid"),
        )
    }

    /// Equal-weight mixture `0.5 p + 0.5 q` as one flat mixture.
    pub fn or_composition(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::dims(self.dim(), other.dim()));
        }
        let weights = self
            .weights
            .iter()
            .chain(&other.weights)
            .map(|w| 0.5 * w)
            .collect();
        let means = ndarray::concatenate(Axis(0), &[self.means.view(), other.means.view()]).expect("same d");
        let vars = ndarray::concatenate(Axis(0), &[self.vars.view(), other.vars.view()]).expect("same d");
        Self::new(weights, means, vars)
    }

    /// The normalized product `p q / Z` as a mixture of `N_p N_q` components.
    pub fn product(&self, other: &Self) -> Result<Self> {
        let d = self.dim();
        if d != other.dim() {
            return Err(Error::dims(d, other.dim()));
        }
        let k = self.n_components() * other.n_components();
        let mut log_w = Vec::with_capacity(k);
        let mut means = Array2::zeros((k, d));
        let mut vars = Array2::zeros((k, d));
        for i in 0..self.n_components() {
            for j in 0..other.n_components() {
                let row = log_w.len();
                // Gaussian products: precisions add, and the scale factor is
                // N(mu_i; mu_j, v_i + v_j).
                let mut lw = self.weights[i].ln() + other.weights[j].ln();
                for c in 0..d {
                    let (ma, va) = (self.means[[i, c]], self.vars[[i, c]]);
                    let (mb, vb) = (other.means[[j, c]], other.vars[[j, c]]);
                    let v = 1.0 / (1.0 / va + 1.0 / vb);
                    vars[[row, c]] = v;
                    means[[row, c]] = v * (ma / va + mb / vb);
                    let s = va + vb;
                    lw -= 0.5 * (LN_2PI + s.ln() + (ma - mb) * (ma - mb) / s);
                }
                log_w.push(lw);
            }
        }
        let lse = logsumexp(&log_w);
        let weights: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
        let total: f64 = weights.iter().sum();
        Self::new(weights.iter().map(|w| w / total).collect(), means, vars)
    }

    /// Text table: `d N`, then one `w mu.. v..` line per component.
    pub fn to_table(&self) -> String {
        let mut s = format!("{} {}\n", self.dim(), self.n_components());
        for n in 0..self.n_components() {
            let mut fields = vec![format!("{:.17e}", self.weights[n])];
            fields.extend(self.means.row(n).iter().map(|v| format!("{v:.17e}")));
            fields.extend(self.vars.row(n).iter().map(|v| format!("{v:.17e}")));
            s.push_str(&fields.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("mixture table: {msg}"));
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let head = lines.next().ok_or_else(|| bad("empty".into()))?;
        let hv: Vec<usize> = head
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(format!("bad header `{head}`"))))
            .collect::<Result<_>>()?;
        let [d, n] = hv[..] else {
            return Err(bad(format!("header must be `d N`, got `{head}`")));
        };
        let mut weights = Vec::with_capacity(n);
        let mut means = Array2::zeros((n, d));
        let mut vars = Array2::zeros((n, d));
        for k in 0..n {
            let line = lines.next().ok_or_else(|| bad(format!("missing component {k}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(format!("bad number `{v}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != 1 + 2 * d {
                return Err(bad(format!("component {k} has {} fields, want {}", vals.len(), 1 + 2 * d)));
            }
            weights.push(vals[0]);
            for j in 0..d {
                means[[k, j]] = vals[1 + j];
                vars[[k, j]] = vals[1 + d + j];
            }
        }
        if lines.next().is_some() {
            return Err(bad("trailing lines".into()));
        }
        Self::new(weights, means, vars)
    }
}

/// Marginal of a diffusion started at `base`: means scaled by `S(t)`,
/// variances `S^2 v + gamma^2`.
pub fn dm_marginal(base: &GaussianMixture, sched: &NoisingSchedule, t: f64) -> Result<GaussianMixture> {
    let e = sched.eval(t)?;
    let means = base.means.mapv(|m| e.s * m);
    let vars = base.vars.mapv(|v| e.s * e.s * v + e.gamma * e.gamma);
    GaussianMixture::new(base.weights.clone(), means, vars)
}

/// Marginal of `(1 - t) X0 + t X1 + gamma Z` under independent coupling.
pub fn si_marginal(m0: &GaussianMixture, m1: &GaussianMixture, t: f64, gamma: f64) -> Result<GaussianMixture> {
    if m0.dim() != m1.dim() {
        return Err(Error::dims(m0.dim(), m1.dim()));
    }
    let (n0, n1, d) = (m0.n_components(), m1.n_components(), m0.dim());
    let mut weights = Vec::with_capacity(n0 * n1);
    let mut means = Array2::zeros((n0 * n1, d));
    let mut vars = Array2::zeros((n0 * n1, d));
    let s = 1.0 - t;
    for a in 0..n0 {
        for b in 0..n1 {
            let k = a * n1 + b;
            weights.push(m0.weights[a] * m1.weights[b]);
            for j in 0..d {
                means[[k, j]] = s * m0.means[[a, j]] + t * m1.means[[b, j]];
                vars[[k, j]] = s * s * m0.vars[[a, j]] + t * t * m1.vars[[b, j]] + gamma * gamma;
            }
        }
    }
    // Products of weights can drift from 1 by a few ulps.
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GaussianMixture::new(weights, means, vars)
}

/// `E[X1 - X0 | Y_t = y]` for the interpolant above.
pub fn si_velocity(
    m0: &GaussianMixture,
    m1: &GaussianMixture,
    t: f64,
    gamma: f64,
    y: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let mt = si_marginal(m0, m1, t, gamma)?;
    let r = mt.responsibilities(y)?;
    let (n1, d) = (m1.n_components(), m0.dim());
    let mut out = Array1::zeros(d);
    for (k, rk) in r.iter().enumerate() {
        if *rk == 0.0 {
            continue;
        }
        let (a, b) = (k / n1, k % n1);
        for j in 0..d {
            let (v0, v1) = (m0.vars[[a, j]], m1.vars[[b, j]]);
            let gain = (t * v1 - (1.0 - t) * v0) / mt.vars[[k, j]];
            let jump = m1.means[[b, j]] - m0.means[[a, j]];
            out[j] += rk * (jump + gain * (y[j] - mt.means[[k, j]]));
        }
    }
    Ok(out)
}

/// A time-indexed family of exact mixture marginals.
#[derive(Clone, Debug, PartialEq)]
pub enum MarginalFamily {
    /// Diffusion started at `base`.
    Dm { sched: NoisingSchedule, base: GaussianMixture },
    /// Interpolant with noise `sqrt(amp t (1 - t))` between `m0` and `m1`.
    Si { amp: f64, m0: GaussianMixture, m1: GaussianMixture },
    /// The same mixture at every time.
    Static(GaussianMixture),
}

impl MarginalFamily {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dm { base, .. } => base.dim(),
            Self::Si { m0, .. } => m0.dim(),
            Self::Static(m) => m.dim(),
        }
    }

    pub fn at(&self, t: f64) -> Result<GaussianMixture> {
        match self {
            Self::Dm { sched, base } => dm_marginal(base, sched, t),
            Self::Si { amp, m0, m1 } => {
                let g = si_gamma_value(t, *amp)?;
                if t == 0.0 {
                    return Ok(m0.clone());
                }
                if t == 1.0 {
                    return Ok(m1.clone());
                }
                si_marginal(m0, m1, t, g)
            }
            Self::Static(m) => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::domain(format!("time {t} outside [0, 1]")));
                }
                Ok(m.clone())
            }
        }
    }

    pub fn log_density(&self, t: f64, x: ArrayView1<f64>) -> Result<f64> {
        self.at(t)?.log_density(x)
    }

    pub fn score(&self, t: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.at(t)?.score(x)
    }

    /// Interpolant velocity `E[X1 - X0 | Y_t = y]`; zero for other families.
    pub fn velocity(&self, t: f64, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        match self {
            Self::Si { amp, m0, m1 } => {
                let g = si_gamma_value(t, *amp)?;
                si_velocity(m0, m1, t, g, y)
            }
            _ => Err(Error::domain("velocity is only defined for interpolant families")),
        }
    }

    /// `(gamma, gamma_dot)` of the underlying noise.
    pub fn gamma_pair(&self, t: f64) -> Result<(f64, f64)> {
        match self {
            Self::Dm { sched, .. } => sched.gamma_pair(t),
            Self::Si { amp, .. } => si_gamma(t, *amp),
            Self::Static(_) => Ok((0.0, 0.0)),
        }
    }

    /// Default finite-difference step for [`Self::time_score`].
    pub fn default_step(t: f64) -> f64 {
        1e-3f64.min(0.5 * t.min(1.0 - t))
    }

    /// `d/dt log p_t(x)` by a Richardson-extrapolated central difference of
    /// the exact marginal density.
    pub fn time_score(&self, t: f64, x: ArrayView1<f64>) -> Result<f64> {
        self.time_score_step(t, x, Self::default_step(t))
    }

    pub fn time_score_step(&self, t: f64, x: ArrayView1<f64>, h: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) || !(h > 0.0) || t - h < 0.0 || t + h > 1.0 {
            return Err(Error::domain(format!(
                "time score needs an interior time with room for the stencil (t = {t}, h = {h})"
            )));
        }
        let lp = |s: f64| self.log_density(s, x);
        let d1 = (lp(t + h)? - lp(t - h)?) / (2.0 * h);
        let d2 = (lp(t + 0.5 * h)? - lp(t - 0.5 * h)?) / h;
        Ok((4.0 * d2 - d1) / 3.0)
    }
}
