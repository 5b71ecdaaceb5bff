//! Generative SDE integrators, MALA, resampling and sequential Monte Carlo.
//!
//! Randomness is drawn from per-particle ChaCha streams keyed by
//! `(seed, round)`, so results do not depend on how work is scheduled.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::density::{Target, TimeDensity};
use crate::error::{Error, Result};
use crate::gmm::MarginalFamily;
use crate::math::logsumexp;
use crate::schedules::NoisingSchedule;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for particle `i` in round `round` of a run seeded with `seed`.
pub fn particle_rng(seed: u64, round: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(round)));
    rng.set_stream(i);
    rng
}

/// One standard-normal row per particle, each from its own stream.
fn noise(seed: u64, round: u64, n: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = particle_rng(seed, round, i as u64);
        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    out
}

fn uniforms(seed: u64, round: u64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| particle_rng(seed, round, i as u64).gen::<f64>())
        .collect()
}

/// Effective sample size `(sum w)^2 / sum w^2` from log-weights.
pub fn ess(log_weights: &[f64]) -> f64 {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(a, b), l| {
        let w = (l - m).exp();
        (a + w, b + w * w)
    });
    s1 * s1 / s2
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    pub positions: Array2<f64>,
    pub log_weights: Vec<f64>,
    pub seed: u64,
    /// Counter of random operations performed so far.
    pub round: u64,
    /// Levels at which resampling happened.
    pub resample_levels: Vec<usize>,
}

impl ParticleSystem {
    pub fn new(positions: Array2<f64>, seed: u64) -> Self {
        let n = positions.nrows();
        Self {
            positions,
            log_weights: vec![0.0; n],
            seed,
            round: 0,
            resample_levels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.log_weights)
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let m = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    fn next_round(&mut self) -> u64 {
        self.round += 1;
        self.round
    }

    /// Weighted mean of the positions.
    pub fn mean(&self) -> Array1<f64> {
        let w = Array1::from(self.normalized_weights());
        self.positions.t().dot(&w)
    }
}

/// Multinomial resampling; weights are reset to uniform.
pub fn multinomial_resample(sys: &mut ParticleSystem) -> Result<()> {
    let w = sys.normalized_weights();
    let idx = WeightedIndex::new(&w).map_err(|_| Error::domain("all particle weights vanished"))?;
    let round = sys.next_round();
    let mut rng = particle_rng(sys.seed, round, u64::MAX);
    let picks: Vec<usize> = (0..sys.len()).map(|_| idx.sample(&mut rng)).collect();
    sys.positions = sys.positions.select(Axis(0), &picks);
    sys.log_weights = vec![0.0; sys.len()];
    Ok(())
}

/// `log N(x; mean, var I)` per row, up to the shared constant.
fn gauss_log_kernel(x: ArrayView2<f64>, mean: ArrayView2<f64>, var: f64) -> Vec<f64> {
    let d = x.ncols() as f64;
    x.rows()
        .into_iter()
        .zip(mean.rows())
        .map(|(a, b)| {
            let q: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
            -0.5 * q / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
        })
        .collect()
}

/// Batched MALA over all particles (weights untouched). Returns the mean
/// acceptance rate of each step.
pub fn mala_steps(target: &dyn Target, sys: &mut ParticleSystem, step: f64, n_steps: usize) -> Result<Vec<f64>> {
    let mut rates = Vec::with_capacity(n_steps);
    let mut lp = target.log_density(sys.positions.view())?;
    let mut sc = target.score(sys.positions.view())?;
    for _ in 0..n_steps {
        rates.push(mala_one(target, sys, step, &mut lp, &mut sc)?);
    }
    Ok(rates)
}

fn mala_one(
    target: &dyn Target,
    sys: &mut ParticleSystem,
    step: f64,
    lp: &mut Vec<f64>,
    sc: &mut Array2<f64>,
) -> Result<f64> {
    let (n, d) = sys.positions.dim();
    let h2 = step * step;
    let round = sys.next_round();
    let xi = noise(sys.seed, round, n, d);
    let mean_fwd = &sys.positions + &(&*sc * (0.5 * h2));
    let prop = &mean_fwd + &(xi * step);
    let lp_new = target.log_density(prop.view())?;
    let sc_new = target.score(prop.view())?;
    let mean_bwd = &prop + &(&sc_new * (0.5 * h2));
    let q_fwd = gauss_log_kernel(prop.view(), mean_fwd.view(), h2);
    let q_bwd = gauss_log_kernel(sys.positions.view(), mean_bwd.view(), h2);
    let u = uniforms(sys.seed, sys.next_round(), n);
    let mut accepted = 0usize;
    for i in 0..n {
        let log_alpha = lp_new[i] - lp[i] + q_bwd[i] - q_fwd[i];
        if log_alpha.is_nan() {
            return Err(Error::non_finite("mala acceptance ratio"));
        }
        if u[i].ln() < log_alpha {
            accepted += 1;
            sys.positions.row_mut(i).assign(&prop.row(i));
            sc.row_mut(i).assign(&sc_new.row(i));
            lp[i] = lp_new[i];
        }
    }
    Ok(accepted as f64 / n as f64)
}

/// `log q(y | x) - log q(x | y)` for the MALA proposal, for checking the
/// Metropolis correction.
pub fn mala_log_proposal_ratio(target: &dyn Target, x: ArrayView1<f64>, y: ArrayView1<f64>, step: f64) -> Result<f64> {
    let h2 = step * step;
    let xs = x.insert_axis(Axis(0));
    let ys = y.insert_axis(Axis(0));
    let mx = &xs + &(target.score(xs)? * (0.5 * h2));
    let my = &ys + &(target.score(ys)? * (0.5 * h2));
    Ok(gauss_log_kernel(ys, mx.view(), h2)[0] - gauss_log_kernel(xs, my.view(), h2)[0])
}

/// A MALA chain per row of `x0`; returns every state and the acceptance rate.
pub fn mala_chain(target: &dyn Target, x0: Array2<f64>, step: f64, n_steps: usize, seed: u64) -> Result<(Vec<Array2<f64>>, f64)> {
    let mut sys = ParticleSystem::new(x0, seed);
    let mut lp = target.log_density(sys.positions.view())?;
    let mut sc = target.score(sys.positions.view())?;
    let mut states = Vec::with_capacity(n_steps);
    let mut acc = 0.0;
    for _ in 0..n_steps {
        acc += mala_one(target, &mut sys, step, &mut lp, &mut sc)?;
        states.push(sys.positions.clone());
    }
    Ok((states, acc / n_steps.max(1) as f64))
}

/// Reverse-time Euler-Maruyama for a diffusion, from `N(0, gamma(t_K)^2 I)`
/// at `grid[0]` down to `grid[last]` (a decreasing grid).
pub fn dm_denoise(
    score: &dyn TimeDensity,
    sched: &NoisingSchedule,
    grid: &[f64],
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    check_grid(grid, false)?;
    let d = score.dim();
    let g0 = sched.eval(grid[0])?.gamma;
    let mut y = noise(seed, 0, n, d) * g0;
    for (k, w) in grid.windows(2).enumerate() {
        let (t, dt) = (w[0], w[0] - w[1]);
        let e = sched.eval(t)?;
        let s = score.score(t, y.view())?;
        let drift = &y * e.f - &(s * (e.g * e.g));
        let xi = noise(seed, k as u64 + 1, n, d);
        y = &y - &(drift * dt) + &(xi * (e.g * dt.sqrt()));
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("denoising trajectory"));
        }
    }
    Ok(y)
}

fn check_grid(grid: &[f64], increasing: bool) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::domain("time grid needs at least two points"));
    }
    let ok = grid
        .windows(2)
        .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] });
    if !ok {
        return Err(Error::domain("time grid must be strictly monotone"));
    }
    Ok(())
}

/// A velocity field `v(t, x)`.
pub trait VelocityField: Sync {
    fn velocity(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl VelocityField for MarginalFamily {
    fn velocity(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, r) in x.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&MarginalFamily::velocity(self, t, r)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// From `t = 0` towards `t = 1`.
    Forward,
    /// From `t = 1` towards `t = 0`.
    Backward,
}

/// Drifts of the interpolant SDEs with diffusion `g`:
/// forward `v - (gamma' gamma - g^2/2) s`, backward `v - (gamma' gamma + g^2/2) s`.
pub struct SiKernels<'a> {
    pub velocity: &'a dyn VelocityField,
    pub score: &'a dyn TimeDensity,
    pub amp: f64,
    pub g: f64,
}

impl SiKernels<'_> {
    /// `gamma'(t) gamma(t)`, finite on all of `[0, 1]`.
    fn gg(&self, t: f64) -> f64 {
        0.5 * self.amp * (1.0 - 2.0 * t)
    }

    pub fn drift(&self, t: f64, x: ArrayView2<f64>, dir: Direction) -> Result<Array2<f64>> {
        let v = self.velocity.velocity(t, x)?;
        let s = self.score.score(t, x)?;
        let half = 0.5 * self.g * self.g;
        let c = match dir {
            Direction::Forward => self.gg(t) - half,
            Direction::Backward => self.gg(t) + half,
        };
        Ok(v - s * c)
    }
}

/// Euler-Maruyama integration of the interpolant SDE along `grid`
/// (increasing for `Forward`, decreasing for `Backward`).
pub fn si_integrate(kernels: &SiKernels, grid: &[f64], dir: Direction, x0: Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    check_grid(grid, dir == Direction::Forward)?;
    let (n, d) = x0.dim();
    let mut y = x0;
    for (k, w) in grid.windows(2).enumerate() {
        let dt = (w[1] - w[0]).abs();
        let b = kernels.drift(w[0], y.view(), dir)?;
        let sign = if dir == Direction::Forward { 1.0 } else { -1.0 };
        y = &y + &(b * (sign * dt));
        if kernels.g > 0.0 {
            y = &y + &(noise(seed, k as u64, n, d) * (kernels.g * dt.sqrt()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("interpolant trajectory"));
        }
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmcConfig {
    /// Resample when ESS falls below `alpha * N`.
    pub alpha: f64,
    /// MALA steps per level.
    pub mala_steps: usize,
    pub init_step: f64,
    /// Adapt the MALA step towards 75% acceptance during the first half of
    /// each level's steps.
    pub adapt: bool,
    /// Keep the particle positions seen at every level.
    pub record_levels: bool,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            mala_steps: 16,
            init_step: 0.1,
            adapt: true,
            record_levels: false,
        }
    }
}

pub const TARGET_ACCEPTANCE: f64 = 0.75;

#[derive(Clone, Debug)]
pub struct SmcResult {
    pub system: ParticleSystem,
    /// Estimate of `log(Z_0 / Z_K)`.
    pub log_normalizer: f64,
    pub n_resample: usize,
    /// ESS after each reweighting, from level `K - 1` down to 0.
    pub ess_history: Vec<f64>,
    pub acceptance: Vec<f64>,
    /// Positions used for the reweighting at each level (when recorded).
    pub level_positions: Vec<Array2<f64>>,
    pub final_step: f64,
}

fn rejuvenate(target: &dyn Target, sys: &mut ParticleSystem, cfg: &SmcConfig, step: &mut f64) -> Result<f64> {
    if cfg.mala_steps == 0 {
        return Ok(f64::NAN);
    }
    let mut lp = target.log_density(sys.positions.view())?;
    let mut sc = target.score(sys.positions.view())?;
    let burn = cfg.mala_steps / 2;
    let mut acc = 0.0;
    for j in 0..cfg.mala_steps {
        let a = mala_one(target, sys, *step, &mut lp, &mut sc)?;
        acc += a;
        if cfg.adapt && j < burn {
            *step *= ((a - TARGET_ACCEPTANCE) * 0.5 / ((j + 1) as f64).sqrt()).exp();
        }
    }
    Ok(acc / cfg.mala_steps as f64)
}

fn reweight(sys: &mut ParticleSystem, incr: &[f64]) -> Result<f64> {
    let lse_w = logsumexp(&sys.log_weights);
    let terms: Vec<f64> = sys
        .log_weights
        .iter()
        .zip(incr)
        .map(|(w, d)| w - lse_w + d)
        .collect();
    let step_lz = logsumexp(&terms);
    for (w, d) in sys.log_weights.iter_mut().zip(incr) {
        *w += d;
    }
    if sys.log_weights.iter().all(|w| *w == f64::NEG_INFINITY) || step_lz.is_nan() {
        return Err(Error::domain("all particle weights vanished"));
    }
    Ok(step_lz)
}

/// SMC with adaptive resampling from `targets[K]` (the initial system must
/// hold samples of it, possibly weighted) down to `targets[0]`.
pub fn smc_classic(targets: &[&dyn Target], mut sys: ParticleSystem, cfg: &SmcConfig) -> Result<SmcResult> {
    if targets.len() < 2 {
        return Err(Error::domain("SMC needs at least two targets"));
    }
    let k_max = targets.len() - 1;
    let n = sys.len() as f64;
    let mut out = SmcResult {
        system: sys.clone(),
        log_normalizer: 0.0,
        n_resample: 0,
        ess_history: Vec::new(),
        acceptance: Vec::new(),
        level_positions: Vec::new(),
        final_step: cfg.init_step,
    };
    let mut step = cfg.init_step;
    for k in (0..k_max).rev() {
        if cfg.record_levels {
            out.level_positions.push(sys.positions.clone());
        }
        let a = targets[k].log_density(sys.positions.view())?;
        let b = targets[k + 1].log_density(sys.positions.view())?;
        let incr: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a - b).collect();
        out.log_normalizer += reweight(&mut sys, &incr)?;
        let e = sys.ess();
        out.ess_history.push(e);
        if e < cfg.alpha * n {
            multinomial_resample(&mut sys)?;
            sys.resample_levels.push(k);
            out.n_resample += 1;
        }
        out.acceptance.push(rejuvenate(targets[k], &mut sys, cfg, &mut step)?);
    }
    out.final_step = step;
    out.system = sys;
    Ok(out)
}

/// SMC along a diffusion/interpolant path (times `grid[K] > .. > grid[0]`)
/// with Euler-Maruyama proposal kernels, adaptive resampling and MALA
/// rejuvenation.
pub fn smc_diffusion(
    targets: &[&dyn Target],
    grid: &[f64],
    kernels: &SiKernels,
    mut sys: ParticleSystem,
    cfg: &SmcConfig,
) -> Result<SmcResult> {
    if targets.len() != grid.len() || grid.len() < 2 {
        return Err(Error::domain("need one target per grid time (at least two)"));
    }
    check_grid(grid, true)?;
    if !(kernels.g > 0.0) {
        return Err(Error::domain("kernel diffusion g must be > 0"));
    }
    let k_max = grid.len() - 1;
    let n = sys.len();
    let nf = n as f64;
    let d = sys.dim();
    let mut out = SmcResult {
        system: sys.clone(),
        log_normalizer: 0.0,
        n_resample: 0,
        ess_history: Vec::new(),
        acceptance: Vec::new(),
        level_positions: Vec::new(),
        final_step: cfg.init_step,
    };
    let mut step = cfg.init_step;
    for k in (0..k_max).rev() {
        let (t_hi, t_lo) = (grid[k + 1], grid[k]);
        let dt = t_hi - t_lo;
        let var = kernels.g * kernels.g * dt;
        let y = sys.positions.clone();
        let mean_b = &y - &(kernels.drift(t_hi, y.view(), Direction::Backward)? * dt);
        let round = sys.next_round();
        let x = &mean_b + &(noise(sys.seed, round, n, d) * var.sqrt());
        let mean_f = &x + &(kernels.drift(t_lo, x.view(), Direction::Forward)? * dt);
        let q_f = gauss_log_kernel(y.view(), mean_f.view(), var);
        let q_b = gauss_log_kernel(x.view(), mean_b.view(), var);
        let p_lo = targets[k].log_density(x.view())?;
        let p_hi = targets[k + 1].log_density(y.view())?;
        let incr: Vec<f64> = (0..n).map(|i| p_lo[i] + q_f[i] - p_hi[i] - q_b[i]).collect();
        sys.positions = x;
        if cfg.record_levels {
            out.level_positions.push(sys.positions.clone());
        }
        out.log_normalizer += reweight(&mut sys, &incr)?;
        let e = sys.ess();
        out.ess_history.push(e);
        if e < cfg.alpha * nf {
            multinomial_resample(&mut sys)?;
            sys.resample_levels.push(k);
            out.n_resample += 1;
        }
        out.acceptance.push(rejuvenate(targets[k], &mut sys, cfg, &mut step)?);
    }
    out.final_step = step;
    out.system = sys;
    Ok(out)
}
