//! Evaluation metrics for learned densities and sample sets.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::density::{Target, TimeDensity};
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, MarginalFamily};
use crate::losses::{diffclf_per_class, diffclf_value_of, ClfBatch};
use crate::math::logsumexp;

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Mean squared difference of two score fields over `samples`.
pub fn fisher_divergence(model: &dyn Target, oracle: &dyn Target, samples: ArrayView2<f64>) -> Result<f64> {
    let a = model.score(samples)?;
    let b = oracle.score(samples)?;
    if a.dim() != b.dim() {
        return Err(Error::dims(b.ncols(), a.ncols()));
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum();
    Ok(sum / samples.nrows() as f64)
}

/// Multiclass classification loss over `times`, with `m` oracle samples per
/// time.
pub fn clf_metric<R: Rng + ?Sized>(
    model: &dyn TimeDensity,
    fam: &MarginalFamily,
    times: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let batch = ClfBatch::from_family(fam, times.to_vec(), m, rng)?;
    diffclf_value_of(model, &batch)
}

/// Importance-sampling ESS in percent of weights `exp(log_model - log_exact)`.
pub fn is_ess_from_logs(log_model: &[f64], log_exact: &[f64]) -> Result<f64> {
    if log_model.len() != log_exact.len() || log_model.is_empty() {
        return Err(Error::dims(log_exact.len(), log_model.len()));
    }
    let lw: Vec<f64> = log_model.iter().zip(log_exact).map(|(a, b)| a - b).collect();
    let ess = (2.0 * logsumexp(&lw) - logsumexp(&lw.iter().map(|w| 2.0 * w).collect::<Vec<_>>())).exp();
    if !ess.is_finite() {
        return Err(Error::non_finite("importance weights"));
    }
    Ok(100.0 * ess / lw.len() as f64)
}

/// ESS percentage of the model against the exact marginal at `t` on exact
/// samples.
pub fn is_ess(model: &dyn TimeDensity, fam: &MarginalFamily, t: f64, samples: ArrayView2<f64>) -> Result<f64> {
    is_ess_from_logs(&model.log_density(t, samples)?, &TimeDensity::log_density(fam, t, samples)?)
}

/// Coefficient of determination of `model` against `exact` after removing
/// the best constant offset.
pub fn r2(model: &[f64], exact: &[f64]) -> Result<f64> {
    if model.len() != exact.len() || model.len() < 2 {
        return Err(Error::dims(exact.len(), model.len()));
    }
    let n = exact.len() as f64;
    let offset = exact.iter().zip(model).map(|(e, m)| e - m).sum::<f64>() / n;
    let mean = exact.iter().sum::<f64>() / n;
    let ss_res: f64 = exact.iter().zip(model).map(|(e, m)| (e - m - offset).powi(2)).sum();
    let ss_tot: f64 = exact.iter().map(|e| (e - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::domain("exact log-densities are constant"));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Gaussian kernel `exp(-|x - y|^2 / (2 h^2))`.
pub fn rbf_kernel(x: ArrayView1<f64>, y: ArrayView1<f64>, bandwidth: f64) -> f64 {
    let d2: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

/// Median pairwise distance over the union of both sets.
pub fn median_bandwidth(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let pts: Vec<ArrayView1<f64>> = x.rows().into_iter().chain(y.rows()).collect();
    let mut d: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let pts = &pts;
            (i + 1..pts.len()).map(move |j| {
                pts[i].iter().zip(pts[j].iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
        })
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Unbiased squared MMD with a fixed bandwidth.
pub fn mmd_with_bandwidth(x: ArrayView2<f64>, y: ArrayView2<f64>, bandwidth: f64) -> Result<f64> {
    let (n, m) = (x.nrows(), y.nrows());
    if n < 2 || m < 2 {
        return Err(Error::domain("MMD needs at least two samples per set"));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::dims(x.ncols(), y.ncols()));
    }
    let within = |a: ArrayView2<f64>| -> f64 {
        let k = a.nrows();
        let s: f64 = (0..k)
            .into_par_iter()
            .map(|i| (0..k).filter(|j| *j != i).map(|j| rbf_kernel(a.row(i), a.row(j), bandwidth)).sum::<f64>())
            .collect::<Vec<_>>()
            .iter()
            .sum();
        s / (k * (k - 1)) as f64
    };
    let cross: f64 = (0..n)
        .into_par_iter()
        .map(|i| (0..m).map(|j| rbf_kernel(x.row(i), y.row(j), bandwidth)).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        / (n * m) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// Unbiased squared MMD with the median-distance bandwidth.
pub fn mmd(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    mmd_with_bandwidth(x, y, median_bandwidth(x, y))
}

fn random_directions<R: Rng + ?Sized>(d: usize, n_proj: usize, rng: &mut R) -> Vec<Array1<f64>> {
    (0..n_proj)
        .map(|_| loop {
            let v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.dot(&v).sqrt();
            if norm > 1e-12 {
                break v / norm;
            }
        })
        .collect()
}

/// Sorted projections with normalized weights.
fn weighted_projection(x: ArrayView2<f64>, w: &[f64], dir: &Array1<f64>) -> Vec<(f64, f64)> {
    let total: f64 = w.iter().sum();
    let mut p: Vec<(f64, f64)> = x.dot(dir).iter().zip(w).map(|(v, wi)| (*v, wi / total)).collect();
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    p
}

/// `int_0^1 (Q_a(u) - Q_b(u))^2 du` for two discrete weighted measures.
fn w2_squared_1d(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    const TINY: f64 = 1e-14;
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let mass = ra.min(rb);
        acc += mass * (a[i].0 - b[j].0).powi(2);
        ra -= mass;
        rb -= mass;
        if ra <= TINY {
            i += 1;
            ra = a.get(i).map_or(0.0, |p| p.1);
        }
        if rb <= TINY {
            j += 1;
            rb = b.get(j).map_or(0.0, |p| p.1);
        }
    }
    acc
}

/// `sup_s |F_a(s) - F_b(s)|` for two discrete weighted measures.
fn ks_1d(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut sup = 0.0f64;
    while i < a.len() || j < b.len() {
        let s = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.0.min(y.0),
            (Some(x), None) => x.0,
            (None, Some(y)) => y.0,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i].0 == s {
            fa += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == s {
            fb += b[j].1;
            j += 1;
        }
        sup = sup.max((fa - fb).abs());
    }
    sup.min(1.0)
}

fn check_sets(x: ArrayView2<f64>, wx: &[f64], y: ArrayView2<f64>, wy: &[f64]) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::dims(x.ncols(), y.ncols()));
    }
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::domain("empty sample set"));
    }
    if wx.len() != x.nrows() || wy.len() != y.nrows() {
        return Err(Error::dims(x.nrows(), wx.len()));
    }
    if wx.iter().chain(wy).any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::domain("weights must be finite and non-negative"));
    }
    Ok(())
}

fn sliced<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    wx: &[f64],
    y: ArrayView2<f64>,
    wy: &[f64],
    n_proj: usize,
    rng: &mut R,
    f: fn(&[(f64, f64)], &[(f64, f64)]) -> f64,
) -> Result<f64> {
    check_sets(x, wx, y, wy)?;
    let dirs = random_directions(x.ncols(), n_proj, rng);
    let vals: Vec<f64> = dirs
        .par_iter()
        .map(|d| f(&weighted_projection(x, wx, d), &weighted_projection(y, wy, d)))
        .collect();
    Ok(vals.iter().sum::<f64>() / n_proj as f64)
}

/// Sliced 2-Wasserstein distance between weighted sample sets: the root of
/// the mean squared 1-D distance over random projections.
pub fn sliced_w2_weighted<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    wx: &[f64],
    y: ArrayView2<f64>,
    wy: &[f64],
    n_proj: usize,
    rng: &mut R,
) -> Result<f64> {
    Ok(sliced(x, wx, y, wy, n_proj, rng, w2_squared_1d)?.max(0.0).sqrt())
}

pub fn sliced_w2<R: Rng + ?Sized>(x: ArrayView2<f64>, y: ArrayView2<f64>, n_proj: usize, rng: &mut R) -> Result<f64> {
    sliced_w2_weighted(x, &vec![1.0; x.nrows()], y, &vec![1.0; y.nrows()], n_proj, rng)
}

/// Mean over random projections of the Kolmogorov-Smirnov distance.
pub fn sliced_ks_weighted<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    wx: &[f64],
    y: ArrayView2<f64>,
    wy: &[f64],
    n_proj: usize,
    rng: &mut R,
) -> Result<f64> {
    sliced(x, wx, y, wy, n_proj, rng, ks_1d)
}

pub fn sliced_ks<R: Rng + ?Sized>(x: ArrayView2<f64>, y: ArrayView2<f64>, n_proj: usize, rng: &mut R) -> Result<f64> {
    sliced_ks_weighted(x, &vec![1.0; x.nrows()], y, &vec![1.0; y.nrows()], n_proj, rng)
}

/// Index of the nearest component mean for each sample.
pub fn assign_modes(samples: ArrayView2<f64>, mixture: &GaussianMixture) -> Result<Vec<usize>> {
    if samples.ncols() != mixture.dim() {
        return Err(Error::dims(mixture.dim(), samples.ncols()));
    }
    Ok(samples
        .rows()
        .into_iter()
        .map(|x| {
            mixture
                .means()
                .axis_iter(Axis(0))
                .map(|m| m.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap_or(0)
        })
        .collect())
}

/// Total variation between the weighted mode histogram and the mixture
/// weights.
pub fn mode_tv_weighted(samples: ArrayView2<f64>, weights: &[f64], mixture: &GaussianMixture) -> Result<f64> {
    if weights.len() != samples.nrows() || weights.is_empty() {
        return Err(Error::dims(samples.nrows(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    let mut hist = vec![0.0; mixture.n_components()];
    for (k, w) in assign_modes(samples, mixture)?.into_iter().zip(weights) {
        hist[k] += w / total;
    }
    Ok(0.5 * hist.iter().zip(mixture.weights()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

pub fn mode_tv(samples: ArrayView2<f64>, mixture: &GaussianMixture) -> Result<f64> {
    mode_tv_weighted(samples, &vec![1.0; samples.nrows()], mixture)
}

/// Per-time evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeRow {
    pub t: f64,
    pub clf_loss: f64,
    pub fisher_div: f64,
    pub ess_pct: f64,
    pub r2: f64,
}

/// Sample-quality metrics of a generated set.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalRow {
    pub mmd: f64,
    pub sliced_w2: f64,
    pub sliced_ks: f64,
    pub mode_tv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<TimeRow>,
    pub global: Option<GlobalRow>,
}

pub const TIME_HEADER: [&str; 5] = ["t", "clf_loss", "fisher_div", "ess_pct", "r2"];
pub const GLOBAL_HEADER: [&str; 4] = ["mmd", "sliced_w2", "sliced_ks", "mode_tv"];

/// Settings for [`evaluate`].
#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub grid: Vec<f64>,
    /// Exact samples per grid time.
    pub samples: usize,
}

/// Per-time metrics of `model` against the exact family on `grid`. The
/// classifier runs over all grid times at once and each row reports the
/// cross-entropy of its own class, so the row mean is the full-grid
/// classification loss.
pub fn evaluate<R: Rng + ?Sized>(
    model: &dyn TimeDensity,
    fam: &MarginalFamily,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<Vec<TimeRow>> {
    if cfg.grid.len() < 2 {
        return Err(Error::Config("evaluation needs at least 2 grid points".into()));
    }
    let batch = ClfBatch::from_family(fam, cfg.grid.clone(), cfg.samples, rng)?;
    let clf = diffclf_per_class(model, &batch)?;
    let mut rows = Vec::with_capacity(cfg.grid.len());
    for ((&t, x), clf_loss) in cfg.grid.iter().zip(&batch.samples).zip(clf) {
        let model_t = crate::density::AtTime { density: model, t };
        let exact_t = crate::density::AtTime { density: fam, t };
        let fd = fisher_divergence(&model_t, &exact_t, x.view())?;
        let lm = model.log_density(t, x.view())?;
        let le = TimeDensity::log_density(fam, t, x.view())?;
        rows.push(TimeRow {
            t,
            clf_loss,
            fisher_div: fd,
            ess_pct: is_ess_from_logs(&lm, &le)?,
            r2: r2(&lm, &le)?,
        });
    }
    Ok(rows)
}

/// Mean of the per-time classification losses of an [`evaluate`] run.
pub fn grid_clf(rows: &[TimeRow]) -> f64 {
    rows.iter().map(|r| r.clf_loss).sum::<f64>() / rows.len() as f64
}
