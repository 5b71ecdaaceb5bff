//! Training objectives: denoising score matching, diffusive classification
//! over noise levels (multiclass, binary and Bregman forms) and conditional
//! time-score matching.
//!
//! Every graph-based loss returns its value together with exact parameter
//! gradients. Losses that involve the score differentiate through the
//! network's input gradient.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::density::TimeDensity;
use crate::ebm::{EnergyModel, TIME_STEP};
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, MarginalFamily};
use crate::grad::{Bindings, Graph, NodeId, Tensor};
use crate::math::{log_sigmoid, logsumexp, standard_normal};
use crate::schedules::{si_gamma, NoisingSchedule};

/// Smallest allowed spacing between the class times of one batch.
pub const MIN_TIME_GAP: f64 = 1e-4;

/// The noising process a model is trained against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Process {
    /// `Y_t = S(t) X_0 + gamma(t) Z`.
    Dm(NoisingSchedule),
    /// `Y_t = (1 - t) X_0 + t X_1 + sqrt(amp t (1 - t)) Z`.
    Si { amp: f64 },
}

impl Process {
    /// Distance of the training times from the endpoints.
    pub fn eps(&self) -> f64 {
        match self {
            Process::Dm(_) => 1e-4,
            Process::Si { .. } => 1e-3,
        }
    }

    pub fn gamma_pair(&self, t: f64) -> Result<(f64, f64)> {
        match self {
            Process::Dm(s) => s.gamma_pair(t),
            Process::Si { amp } => si_gamma(t, *amp),
        }
    }

    /// Exact marginals for mixture endpoints (`m1` is ignored for diffusions).
    pub fn family(&self, m0: &GaussianMixture, m1: &GaussianMixture) -> MarginalFamily {
        match self {
            Process::Dm(sched) => MarginalFamily::Dm {
                sched: *sched,
                base: m0.clone(),
            },
            Process::Si { amp } => MarginalFamily::Si {
                amp: *amp,
                m0: m0.clone(),
                m1: m1.clone(),
            },
        }
    }

    /// Noise clean endpoint samples at per-row times.
    pub fn noisy(
        &self,
        t: &[f64],
        x0: ArrayView2<f64>,
        x1: Option<ArrayView2<f64>>,
        z: Array2<f64>,
    ) -> Result<NoisyBatch> {
        let (b, d) = x0.dim();
        if t.len() != b || z.dim() != (b, d) {
            return Err(Error::Shape("times, anchors and noise must share the batch size".into()));
        }
        let mut anchor = Array2::zeros((b, d));
        let mut anchor_dot = Array2::zeros((b, d));
        let mut gamma = Vec::with_capacity(b);
        let mut gamma_dot = Vec::with_capacity(b);
        match self {
            Process::Dm(sched) => {
                for i in 0..b {
                    let e = sched.eval(t[i])?;
                    anchor.row_mut(i).assign(&(&x0.row(i) * e.s));
                    anchor_dot.row_mut(i).assign(&(&x0.row(i) * e.s_dot));
                    gamma.push(e.gamma);
                    gamma_dot.push(e.gamma_dot);
                }
            }
            Process::Si { amp } => {
                let x1 = x1.ok_or_else(|| Error::Config("interpolant batches need X_1".into()))?;
                if x1.dim() != (b, d) {
                    return Err(Error::Shape("X_0 and X_1 batches differ in shape".into()));
                }
                for i in 0..b {
                    let (g, gd) = si_gamma(t[i], *amp)?;
                    anchor
                        .row_mut(i)
                        .assign(&(&x0.row(i) * (1.0 - t[i]) + &x1.row(i) * t[i]));
                    anchor_dot.row_mut(i).assign(&(&x1.row(i) - &x0.row(i)));
                    gamma.push(g);
                    gamma_dot.push(gd);
                }
            }
        }
        Ok(NoisyBatch {
            t: t.to_vec(),
            anchor,
            anchor_dot,
            z,
            gamma,
            gamma_dot,
        })
    }
}

/// Conditional samples `y = X_t + gamma(t) z` with everything the
/// conditional losses need.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyBatch {
    pub t: Vec<f64>,
    /// Conditional mean `X_t`.
    pub anchor: Array2<f64>,
    /// `d/dt X_t`.
    pub anchor_dot: Array2<f64>,
    pub z: Array2<f64>,
    pub gamma: Vec<f64>,
    pub gamma_dot: Vec<f64>,
}

impl NoisyBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.anchor.ncols()
    }

    pub fn y(&self) -> Array2<f64> {
        let g = ndarray::Array1::from(self.gamma.clone()).insert_axis(Axis(1));
        &self.anchor + &(&self.z * &g)
    }

    /// Append the mirrored `-z` copy of every row.
    pub fn antithetic(mut self) -> Self {
        let neg = self.z.mapv(|v| -v);
        self.z = ndarray::concatenate(Axis(0), &[self.z.view(), neg.view()]).unwrap();
        self.anchor = ndarray::concatenate(Axis(0), &[self.anchor.view(), self.anchor.view()]).unwrap();
        self.anchor_dot =
            ndarray::concatenate(Axis(0), &[self.anchor_dot.view(), self.anchor_dot.view()]).unwrap();
        self.t.extend_from_within(..);
        self.gamma.extend_from_within(..);
        self.gamma_dot.extend_from_within(..);
        self
    }

    /// Duplicate every row `k` times.
    pub fn repeated(&self, k: usize) -> Self {
        let rep = |a: &Array2<f64>| {
            let views: Vec<_> = (0..k).map(|_| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).unwrap()
        };
        let repv = |v: &Vec<f64>| v.iter().copied().cycle().take(v.len() * k).collect();
        Self {
            t: repv(&self.t),
            anchor: rep(&self.anchor),
            anchor_dot: rep(&self.anchor_dot),
            z: rep(&self.z),
            gamma: repv(&self.gamma),
            gamma_dot: repv(&self.gamma_dot),
        }
    }
}

/// Samples from `p_{t_i}` for each class time `t_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClfBatch {
    pub times: Vec<f64>,
    pub samples: Vec<Array2<f64>>,
}

impl ClfBatch {
    pub fn new(times: Vec<f64>, samples: Vec<Array2<f64>>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config(format!(
                "classification over noise levels needs N >= 2 classes, got {}",
                times.len()
            )));
        }
        if samples.len() != times.len() {
            return Err(Error::dims(times.len(), samples.len()));
        }
        let m = samples[0].nrows();
        if m == 0 || samples.iter().any(|s| s.nrows() != m || s.ncols() != samples[0].ncols()) {
            return Err(Error::Shape("every class needs the same number of samples".into()));
        }
        for i in 0..times.len() {
            for j in 0..i {
                if (times[i] - times[j]).abs() < MIN_TIME_GAP {
                    return Err(Error::Config(format!(
                        "class times {} and {} are closer than {MIN_TIME_GAP}",
                        times[j], times[i]
                    )));
                }
            }
        }
        Ok(Self { times, samples })
    }

    pub fn n_classes(&self) -> usize {
        self.times.len()
    }

    pub fn per_class(&self) -> usize {
        self.samples[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].ncols()
    }

    /// Exact samples from a mixture family.
    pub fn from_family<R: Rng + ?Sized>(fam: &MarginalFamily, times: Vec<f64>, m: usize, rng: &mut R) -> Result<Self> {
        let samples = times
            .iter()
            .map(|t| Ok(fam.at(*t)?.sample(m, rng)))
            .collect::<Result<_>>()?;
        Self::new(times, samples)
    }
}

/// `n` i.i.d. times on `[eps, 1 - eps]`, redrawing any that fall within
/// [`MIN_TIME_GAP`] of an earlier one.
pub fn sample_distinct_times<R: Rng + ?Sized>(rng: &mut R, n: usize, eps: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    while out.len() < n {
        let t = rng.gen_range(eps..=1.0 - eps);
        if out.iter().all(|s| (s - t).abs() >= MIN_TIME_GAP) {
            out.push(t);
        }
    }
    out
}

/// Draw endpoint pairs and noise them at i.i.d. times.
pub fn sample_noisy<R: Rng + ?Sized>(
    process: &Process,
    x0: ArrayView2<f64>,
    x1: Option<ArrayView2<f64>>,
    rng: &mut R,
) -> Result<NoisyBatch> {
    let eps = process.eps();
    let t: Vec<f64> = (0..x0.nrows()).map(|_| rng.gen_range(eps..=1.0 - eps)).collect();
    let z = standard_normal(rng, x0.nrows(), x0.ncols());
    process.noisy(&t, x0, x1, z)
}

/// Convex generators of the Bregman family of density-ratio losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bregman {
    /// `r log r - (1 + r) log(1 + r)`, which yields logistic classification.
    Canonical,
    /// `r^2 / 2`.
    Poly,
    /// `1 / r`.
    Recip,
}

impl Bregman {
    pub fn phi(&self, r: f64) -> f64 {
        match self {
            Bregman::Canonical => r * r.ln() - (1.0 + r) * r.ln_1p(),
            Bregman::Poly => 0.5 * r * r,
            Bregman::Recip => 1.0 / r,
        }
    }

    pub fn phi_prime(&self, r: f64) -> f64 {
        match self {
            Bregman::Canonical => r.ln() - r.ln_1p(),
            Bregman::Poly => r,
            Bregman::Recip => -1.0 / (r * r),
        }
    }

    pub fn phi_second(&self, r: f64) -> f64 {
        match self {
            Bregman::Canonical => 1.0 / r - 1.0 / (1.0 + r),
            Bregman::Poly => 1.0,
            Bregman::Recip => 2.0 / (r * r * r),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Bregman::Canonical => "canonical",
            Bregman::Poly => "poly",
            Bregman::Recip => "recip",
        }
    }

    /// `(-phi(r) + r phi'(r), phi'(r))` as graph nodes of `delta = log r`.
    fn terms(&self, g: &mut Graph, delta: NodeId) -> (NodeId, NodeId) {
        match self {
            Bregman::Canonical => {
                let nd = g.neg(delta);
                let a = g.log_sigmoid(nd);
                (g.neg(a), g.log_sigmoid(delta))
            }
            Bregman::Poly => {
                let d2 = g.scale(delta, 2.0);
                let e2 = g.exp(d2);
                (g.scale(e2, 0.5), g.exp(delta))
            }
            Bregman::Recip => {
                let nd = g.neg(delta);
                let e1 = g.exp(nd);
                let nd2 = g.scale(delta, -2.0);
                let e2 = g.exp(nd2);
                (g.scale(e1, -2.0), g.neg(e2))
            }
        }
    }
}

/// Loss value, parameter gradients and named components.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Tensor>,
    pub components: Vec<(&'static str, f64)>,
}

impl LossValue {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A graph under construction for one loss evaluation.
struct LossGraph<'m> {
    g: Graph,
    model: &'m EnergyModel,
    p: Vec<NodeId>,
    inputs: Vec<Tensor>,
}

impl<'m> LossGraph<'m> {
    fn new(model: &'m EnergyModel) -> Self {
        let mut g = Graph::new();
        let p = model.param_nodes(&mut g);
        Self {
            g,
            model,
            p,
            inputs: Vec::new(),
        }
    }

    fn input(&mut self, t: Tensor) -> NodeId {
        let id = self.g.input(t.rows, t.cols);
        self.inputs.push(t);
        id
    }

    fn log_density(&mut self, x: NodeId, times: &[f64]) -> NodeId {
        let tau = self.input(self.model.spec().embedding().embed(times));
        self.model.build_log_density(&mut self.g, &self.p, x, tau)
    }

    fn column(&mut self, v: &[f64]) -> NodeId {
        self.g.constant(Tensor::new(v.len(), 1, v.to_vec()))
    }

    fn finish(mut self, terms: &[(&'static str, NodeId)], grads: bool) -> Result<LossValue> {
        if terms.is_empty() {
            return Err(Error::Config("no loss components enabled".into()));
        }
        let mut total = terms[0].1;
        for (_, t) in &terms[1..] {
            total = self.g.add(total, *t);
        }
        let mut outputs = vec![total];
        outputs.extend(terms.iter().map(|(_, n)| *n));
        if grads {
            let p = self.p.clone();
            outputs.extend(self.g.grad(total, &p)?);
        }
        let vals = self.g.eval(
            Bindings {
                inputs: &self.inputs,
                params: self.model.params(),
            },
            &outputs,
        )?;
        let k = terms.len();
        Ok(LossValue {
            value: vals[0].item(),
            components: terms.iter().zip(&vals[1..=k]).map(|((n, _), v)| (*n, v.item())).collect(),
            grads: vals[k + 1..].to_vec(),
        })
    }
}

fn dsm_term(lg: &mut LossGraph, batch: &NoisyBatch) -> Result<NodeId> {
    if let Some(g) = batch.gamma.iter().find(|g| !(**g > 0.0)) {
        return Err(Error::domain(format!("score matching needs gamma(t) > 0, got {g}")));
    }
    let (b, d) = batch.anchor.dim();
    let x = lg.input(Tensor::from_array(batch.y().view()));
    let lp = lg.log_density(x, &batch.t);
    let ones = lg.g.filled(b, 1, 1.0);
    let s = lg.g.vjp(lp, ones, &[x])[0];
    let gcol = lg.column(&batch.gamma);
    let gb = lg.g.broadcast_cols(gcol, d);
    let gs = lg.g.mul(s, gb);
    let z = lg.g.constant(Tensor::from_array(batch.z.view()));
    let r = lg.g.add(gs, z);
    let r2 = lg.g.square(r);
    let tot = lg.g.sum_all(r2);
    Ok(lg.g.scale(tot, 1.0 / b as f64))
}


/// `mean ||gamma(t) score(t, y) + z||^2`.
pub fn dsm_loss(model: &EnergyModel, batch: &NoisyBatch) -> Result<LossValue> {
    let mut lg = LossGraph::new(model);
    let term = dsm_term(&mut lg, batch)?;
    lg.finish(&[("dsm", term)], true)
}

/// [`dsm_loss`] evaluated directly for any density.
pub fn dsm_value_of(density: &dyn TimeDensity, batch: &NoisyBatch) -> Result<f64> {
    let y = batch.y();
    let mut total = 0.0;
    for i in 0..batch.len() {
        let s = density.score(batch.t[i], y.slice(ndarray::s![i..i + 1, ..]))?;
        total += s
            .row(0)
            .iter()
            .zip(batch.z.row(i))
            .map(|(s, z)| (batch.gamma[i] * s + z).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

fn clf_term(lg: &mut LossGraph, batch: &ClfBatch) -> Result<NodeId> {
    let (n, m, d) = (batch.n_classes(), batch.per_class(), batch.dim());
    let rows = n * m;
    // Row r * n + j holds sample r evaluated at class time j.
    let mut x = Tensor::zeros(rows * n, d);
    let mut times = Vec::with_capacity(rows * n);
    let mut mask = Tensor::zeros(rows, n);
    for (i, s) in batch.samples.iter().enumerate() {
        for k in 0..m {
            let r = i * m + k;
            mask.data[r * n + i] = 1.0;
            for j in 0..n {
                let dst = (r * n + j) * d;
                x.data[dst..dst + d].copy_from_slice(s.row(k).as_slice().expect("standard layout"));
                times.push(batch.times[j]);
            }
        }
    }
    let xn = lg.input(x);
    let lp = lg.log_density(xn, &times);
    let logits = lg.g.reshape(lp, rows, n);
    let lse = lg.g.logsumexp_cols(logits);
    let mk = lg.g.constant(mask);
    let picked = lg.g.mul(logits, mk);
    let own = lg.g.sum_cols(picked);
    let nll = lg.g.sub(lse, own);
    Ok(lg.g.mean_all(nll))
}

fn owned(s: &ClfBatch) -> ClfBatch {
    ClfBatch {
        times: s.times.clone(),
        samples: s
            .samples
            .iter()
            .map(|a| a.as_standard_layout().into_owned())
            .collect(),
    }
}

/// Softmax cross-entropy over the class times.
pub fn diffclf_loss(model: &EnergyModel, batch: &ClfBatch) -> Result<LossValue> {
    let mut lg = LossGraph::new(model);
    let term = clf_term(&mut lg, &owned(batch))?;
    lg.finish(&[("clf", term)], true)
}

/// Value of [`diffclf_loss`] without gradients.
pub fn diffclf_value(model: &EnergyModel, batch: &ClfBatch) -> Result<f64> {
    let mut lg = LossGraph::new(model);
    let term = clf_term(&mut lg, &owned(batch))?;
    Ok(lg.finish(&[("clf", term)], false)?.value)
}

/// The same cross-entropy for any density, evaluated directly.
pub fn diffclf_value_of(density: &dyn TimeDensity, batch: &ClfBatch) -> Result<f64> {
    let per_class = diffclf_per_class(density, batch)?;
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Mean cross-entropy of each class's own samples; their average is
/// [`diffclf_value_of`].
pub fn diffclf_per_class(density: &dyn TimeDensity, batch: &ClfBatch) -> Result<Vec<f64>> {
    let n = batch.n_classes();
    batch
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let per_time: Vec<Vec<f64>> = batch
                .times
                .iter()
                .map(|t| density.log_density(*t, s.view()))
                .collect::<Result<_>>()?;
            let total: f64 = (0..s.nrows())
                .map(|k| {
                    let logits: Vec<f64> = (0..n).map(|j| per_time[j][k]).collect();
                    logsumexp(&logits) - logits[i]
                })
                .sum();
            Ok(total / s.nrows() as f64)
        })
        .collect()
}

/// `log p(t, y) - log p(t', y)` on the stacked samples.
fn log_ratio(lg: &mut LossGraph, t: f64, t2: f64, ys: &Array2<f64>) -> NodeId {
    let x = lg.input(Tensor::from_array(ys.view()));
    let a = lg.log_density(x, &vec![t; ys.nrows()]);
    let b = lg.log_density(x, &vec![t2; ys.nrows()]);
    lg.g.sub(a, b)
}

fn check_pair(t: f64, t2: f64) -> Result<()> {
    if t == t2 {
        return Err(Error::Config("binary classification needs two distinct times".into()));
    }
    Ok(())
}

/// Logistic classification between `p_t` (samples `ys`) and `p_t'` (`ys2`).
pub fn binary_clf_loss(model: &EnergyModel, t: f64, t2: f64, ys: &Array2<f64>, ys2: &Array2<f64>) -> Result<LossValue> {
    check_pair(t, t2)?;
    let mut lg = LossGraph::new(model);
    let d1 = log_ratio(&mut lg, t, t2, ys);
    let d2 = log_ratio(&mut lg, t, t2, ys2);
    let a = lg.g.log_sigmoid(d1);
    let ma = lg.g.mean_all(a);
    let nd2 = lg.g.neg(d2);
    let b = lg.g.log_sigmoid(nd2);
    let mb = lg.g.mean_all(b);
    let s = lg.g.add(ma, mb);
    let term = lg.g.scale(s, -0.5);
    lg.finish(&[("clf", term)], true)
}

/// Bregman density-ratio loss `E_t'[-phi(r) + r phi'(r)] - E_t[phi'(r)]`
/// with `r = p_t / p_t'`.
pub fn bregman_binary_loss(
    model: &EnergyModel,
    phi: Bregman,
    t: f64,
    t2: f64,
    ys: &Array2<f64>,
    ys2: &Array2<f64>,
) -> Result<LossValue> {
    check_pair(t, t2)?;
    let mut lg = LossGraph::new(model);
    let d1 = log_ratio(&mut lg, t, t2, ys);
    let d2 = log_ratio(&mut lg, t, t2, ys2);
    let (a2, _) = phi.terms(&mut lg.g, d2);
    let (_, b1) = phi.terms(&mut lg.g, d1);
    let ma = lg.g.mean_all(a2);
    let mb = lg.g.mean_all(b1);
    let term = lg.g.sub(ma, mb);
    lg.finish(&[("bregman", term)], true)
}

/// Per-row central-difference steps that keep `t +- h` inside `[0, 1]`.
fn fd_steps(t: &[f64]) -> Vec<f64> {
    t.iter()
        .map(|t| TIME_STEP.min(0.5 * t).min(0.5 * (1.0 - t)))
        .collect()
}

/// Conditional time score of `N(y; X_t, gamma^2 I)`.
pub fn ctsm_target(batch: &NoisyBatch) -> Vec<f64> {
    let d = batch.dim() as f64;
    (0..batch.len())
        .map(|i| {
            let (g, gd) = (batch.gamma[i], batch.gamma_dot[i]);
            let z = batch.z.row(i);
            let zz: f64 = z.iter().map(|v| v * v).sum();
            let xz: f64 = batch.anchor_dot.row(i).dot(&z);
            -d * gd / g + xz / g + zz * gd / g
        })
        .collect()
}

fn ctsm_term(lg: &mut LossGraph, batch: &NoisyBatch) -> Result<NodeId> {
    if batch.gamma_dot.iter().any(|g| *g == 0.0 || !g.is_finite()) {
        return Err(Error::domain("time-score matching needs finite, nonzero gamma'(t)"));
    }
    let b = batch.len();
    let h = fd_steps(&batch.t);
    let x = lg.input(Tensor::from_array(batch.y().view()));
    let up: Vec<f64> = batch.t.iter().zip(&h).map(|(t, h)| t + h).collect();
    let dn: Vec<f64> = batch.t.iter().zip(&h).map(|(t, h)| t - h).collect();
    let lu = lg.log_density(x, &up);
    let ld = lg.log_density(x, &dn);
    let diff = lg.g.sub(lu, ld);
    let inv: Vec<f64> = h.iter().map(|h| 0.5 / h).collect();
    let ic = lg.column(&inv);
    let dt = lg.g.mul(diff, ic);
    let target = lg.column(&ctsm_target(batch));
    let r = lg.g.sub(dt, target);
    let r2 = lg.g.square(r);
    let w: Vec<f64> = (0..b)
        .map(|i| (batch.gamma[i] / batch.gamma_dot[i]).powi(2))
        .collect();
    let wc = lg.column(&w);
    let wr = lg.g.mul(r2, wc);
    Ok(lg.g.mean_all(wr))
}

/// Regression of the model's time derivative onto the conditional time
/// score, weighted by `gamma^2 / gamma'^2`.
pub fn ctsm_loss(model: &EnergyModel, batch: &NoisyBatch) -> Result<LossValue> {
    let mut lg = LossGraph::new(model);
    let term = ctsm_term(&mut lg, batch)?;
    lg.finish(&[("ctsm", term)], true)
}

/// Mean squared gap between a density's time derivative and the exact time
/// score on the given samples. Diagnostic only.
pub fn tsm_gap(density: &dyn TimeDensity, fam: &MarginalFamily, t: f64, samples: ArrayView2<f64>) -> Result<f64> {
    let model = density.time_derivative(t, samples)?;
    let exact = fam.time_derivative(t, samples)?;
    Ok(model
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / samples.nrows() as f64)
}

/// The batch for one joint step; absent parts disable their component.
#[derive(Clone, Debug, Default)]
pub struct JointBatch {
    pub dsm: Option<NoisyBatch>,
    pub clf: Option<ClfBatch>,
    pub ctsm: Option<NoisyBatch>,
}

/// Unit-weight sum of the enabled components, built as one graph.
pub fn joint_loss(model: &EnergyModel, batch: &JointBatch) -> Result<LossValue> {
    let mut lg = LossGraph::new(model);
    let mut terms = Vec::new();
    if let Some(b) = &batch.dsm {
        terms.push(("dsm", dsm_term(&mut lg, b)?));
    }
    if let Some(b) = &batch.clf {
        terms.push(("clf", clf_term(&mut lg, &owned(b))?));
    }
    if let Some(b) = &batch.ctsm {
        terms.push(("ctsm", ctsm_term(&mut lg, b)?));
    }
    lg.finish(&terms, true)
}

/// Binary logistic loss evaluated directly (no graph) for any density.
pub fn binary_clf_value_of(density: &dyn TimeDensity, t: f64, t2: f64, ys: ArrayView2<f64>, ys2: ArrayView2<f64>) -> Result<f64> {
    check_pair(t, t2)?;
    let delta = |y: ArrayView2<f64>| -> Result<Vec<f64>> {
        let a = density.log_density(t, y)?;
        let b = density.log_density(t2, y)?;
        Ok(a.iter().zip(&b).map(|(a, b)| a - b).collect())
    };
    let d1 = delta(ys)?;
    let d2 = delta(ys2)?;
    let m1 = d1.iter().map(|d| log_sigmoid(*d)).sum::<f64>() / d1.len() as f64;
    let m2 = d2.iter().map(|d| log_sigmoid(-*d)).sum::<f64>() / d2.len() as f64;
    Ok(-0.5 * (m1 + m2))
}

/// Objectives covered by [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckedLoss {
    Dsm,
    DiffClf(usize),
    BinaryClf,
    Ctsm,
    Bregman(Bregman),
    Joint,
}

impl CheckedLoss {
    pub fn name(&self) -> String {
        match self {
            Self::Dsm => "dsm".into(),
            Self::DiffClf(n) => format!("diffclf_n{n}"),
            Self::BinaryClf => "binary_clf".into(),
            Self::Ctsm => "ctsm".into(),
            Self::Bregman(b) => format!("bregman_{}", b.name()),
            Self::Joint => "joint".into(),
        }
    }

    /// Every objective once, with the classification loss at N = 2 and 4.
    pub fn all() -> Vec<Self> {
        vec![
            Self::Dsm,
            Self::DiffClf(2),
            Self::DiffClf(4),
            Self::BinaryClf,
            Self::Ctsm,
            Self::Bregman(Bregman::Canonical),
            Self::Bregman(Bregman::Poly),
            Self::Bregman(Bregman::Recip),
            Self::Joint,
        ]
    }
}

/// Outcome of one finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub loss: String,
    pub max_rel_err: f64,
    pub n_params: usize,
}

/// Compares the analytic parameter gradient of `loss` at `model` with
/// central differences of step `h`, on a random VP batch of `n` standard
/// normal data points.
pub fn gradient_check(loss: CheckedLoss, model: &EnergyModel, seed: u64, n: usize, h: f64) -> Result<GradCheck> {
    let mut rng = crate::math::stream_rng(seed, 0xc4ec);
    let d = model.dim();
    let process = Process::Dm(NoisingSchedule::vp_default());
    let base = GaussianMixture::standard_normal(d);
    let fam = process.family(&base, &base);
    let noisy = |rng: &mut rand_chacha::ChaCha8Rng| {
        let x0 = base.sample(n, rng);
        sample_noisy(&process, x0.view(), None, rng)
    };
    let eval: Box<dyn Fn(&EnergyModel) -> Result<LossValue>> = match loss {
        CheckedLoss::Dsm => {
            let b = noisy(&mut rng)?;
            Box::new(move |m| dsm_loss(m, &b))
        }
        CheckedLoss::Ctsm => {
            let b = noisy(&mut rng)?;
            Box::new(move |m| ctsm_loss(m, &b))
        }
        CheckedLoss::DiffClf(k) => {
            let times = sample_distinct_times(&mut rng, k, process.eps());
            let b = ClfBatch::from_family(&fam, times, n, &mut rng)?;
            Box::new(move |m| diffclf_loss(m, &b))
        }
        CheckedLoss::BinaryClf | CheckedLoss::Bregman(_) => {
            let ts = sample_distinct_times(&mut rng, 2, process.eps());
            let ys = fam.at(ts[0])?.sample(n, &mut rng);
            let ys2 = fam.at(ts[1])?.sample(n, &mut rng);
            match loss {
                CheckedLoss::Bregman(phi) => Box::new(move |m| bregman_binary_loss(m, phi, ts[0], ts[1], &ys, &ys2)),
                _ => Box::new(move |m| binary_clf_loss(m, ts[0], ts[1], &ys, &ys2)),
            }
        }
        CheckedLoss::Joint => {
            let times = sample_distinct_times(&mut rng, 2, process.eps());
            let batch = JointBatch {
                dsm: Some(noisy(&mut rng)?),
                clf: Some(ClfBatch::from_family(&fam, times, n, &mut rng)?),
                ctsm: Some(noisy(&mut rng)?),
            };
            Box::new(move |m| joint_loss(m, &batch))
        }
    };
    let analytic = eval(model)?.grads;
    let mut work = model.clone();
    let mut f = |p: &[Tensor]| -> Result<f64> {
        work.set_params(p.to_vec())?;
        Ok(eval(&work)?.value)
    };
    let numeric = crate::grad::check::numeric_grad(&mut f, model.params(), h)?;
    Ok(GradCheck {
        loss: loss.name(),
        max_rel_err: crate::grad::check::max_scaled_err(&analytic, &numeric, 1e-8),
        n_params: model.n_params(),
    })
}
