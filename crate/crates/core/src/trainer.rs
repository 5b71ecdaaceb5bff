//! Standardization, Adam and the two-phase training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ebm::{EnergyModel, ModelSpec};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::grad::Tensor;
use crate::losses::{
    joint_loss, sample_distinct_times, sample_noisy, ClfBatch, JointBatch, LossValue, NoisyBatch, Process,
};
use crate::math::stream_rng;

pub const STD_FLOOR: f64 = 1e-8;

/// Per-coordinate affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: ArrayView2<f64>) -> Self {
        let n = data.nrows() as f64;
        let mean = data.mean_axis(Axis(0)).expect("non-empty data");
        let var = data
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(c, m)| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n);
        Self {
            mean: mean.to_vec(),
            std: var.map(|v| v.sqrt().max(STD_FLOOR)).collect(),
        }
    }

    pub fn apply(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let m = Array1::from(self.mean.clone());
        let s = Array1::from(self.std.clone());
        (&data - &m) / &s
    }

    pub fn invert(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let m = Array1::from(self.mean.clone());
        let s = Array1::from(self.std.clone());
        &data * &s + &m
    }
}

/// Standardize `data`, returning the result and the map used.
pub fn standardize(data: ArrayView2<f64>) -> (Array2<f64>, Standardizer) {
    let s = Standardizer::fit(data);
    (s.apply(data), s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.data[i] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSet {
    pub dsm: bool,
    pub clf: bool,
    pub ctsm: bool,
}

impl LossSet {
    pub const DSM: Self = Self {
        dsm: true,
        clf: false,
        ctsm: false,
    };
    pub const DSM_CLF: Self = Self {
        dsm: true,
        clf: true,
        ctsm: false,
    };
    pub const DSM_CTSM: Self = Self {
        dsm: true,
        clf: false,
        ctsm: true,
    };

    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Self {
            dsm: false,
            clf: false,
            ctsm: false,
        };
        for part in s.split('+').map(str::trim) {
            match part {
                "dsm" => out.dsm = true,
                "clf" => out.clf = true,
                "ctsm" => out.ctsm = true,
                other => return Err(Error::Config(format!("unknown loss `{other}`"))),
            }
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        let mut v = Vec::new();
        if self.dsm {
            v.push("dsm");
        }
        if self.clf {
            v.push("clf");
        }
        if self.ctsm {
            v.push("ctsm");
        }
        v.join("+")
    }
}

/// Distribution of DSM times.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DsmTimes {
    /// Uniform on `[eps, 1 - eps]`.
    Uniform,
    /// `log sigma ~ N(mean, std^2)` mapped through the schedule and redrawn
    /// outside `[eps, 1 - eps]`; diffusion processes only.
    LogNormalSigma { mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub process: Process,
    pub spec: ModelSpec,
    pub losses: LossSet,
    pub n_classes: usize,
    pub batch_size: usize,
    /// DSM-only steps before the main phase.
    pub warmup_steps: usize,
    /// Steps of the main phase.
    pub steps: usize,
    pub lr: f64,
    /// Anneal the learning rate to zero over the main phase with a cosine.
    pub cosine_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub log_every: usize,
    pub antithetic: bool,
    pub dsm_times: DsmTimes,
    pub workers: usize,
    /// Record elapsed time in the log; off by default so logs are
    /// reproducible byte for byte.
    pub log_wall_time: bool,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(process: Process, spec: ModelSpec) -> Self {
        Self {
            process,
            spec,
            losses: LossSet::DSM_CLF,
            n_classes: 4,
            batch_size: 1024,
            warmup_steps: 0,
            steps: 1000,
            lr: 5e-4,
            cosine_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_every: 100,
            antithetic: matches!(process, Process::Si { .. }),
            dsm_times: DsmTimes::Uniform,
            workers: 1,
            log_wall_time: false,
            out_dir: None,
        }
    }

    /// Learning rate for the 0-based step `step` (warmup counted).
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine_decay || step < self.warmup_steps {
            return self.lr;
        }
        let frac = (step - self.warmup_steps) as f64 / self.steps.max(1) as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size, log_every and workers must be >= 1".into()));
        }
        if !(self.losses.dsm || self.losses.clf || self.losses.ctsm) {
            return Err(Error::Config("no loss enabled".into()));
        }
        if self.losses.clf {
            if self.n_classes < 2 {
                return Err(Error::Config("classification needs n_classes >= 2".into()));
            }
            if self.batch_size % self.n_classes != 0 {
                return Err(Error::Config(format!(
                    "batch_size {} is not divisible by n_classes {}",
                    self.batch_size, self.n_classes
                )));
            }
        }
        if let DsmTimes::LogNormalSigma { std, .. } = self.dsm_times {
            if !matches!(self.process, Process::Dm(_)) {
                return Err(Error::Config("log-normal sigma times need a diffusion process".into()));
            }
            if !(std > 0.0) {
                return Err(Error::Config("log-normal sigma std must be > 0".into()));
            }
        }
        if self.antithetic && self.batch_size % 2 != 0 {
            return Err(Error::Config("antithetic batches need an even batch_size".into()));
        }
        Ok(())
    }
}

/// Where clean samples come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Fresh exact draws every step (`m1` only for interpolants).
    Oracle {
        m0: GaussianMixture,
        m1: Option<GaussianMixture>,
    },
    /// A fixed dataset, reshuffled every epoch. Interpolant endpoints are
    /// drawn independently from the two sets.
    Dataset { x0: Array2<f64>, x1: Option<Array2<f64>> },
}

impl DataSource {
    fn dim(&self) -> usize {
        match self {
            DataSource::Oracle { m0, .. } => m0.dim(),
            DataSource::Dataset { x0, .. } => x0.ncols(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_dsm: Option<f64>,
    pub loss_clf: Option<f64>,
    pub loss_ctsm: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "step,loss_total,loss_dsm,loss_clf,loss_ctsm,grad_norm,wall_ms";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            opt(self.loss_dsm),
            opt(self.loss_clf),
            opt(self.loss_ctsm),
            self.grad_norm,
            self.wall_ms
        )
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub params: Vec<Vec<f64>>,
    pub adam: AdamState,
    pub rng_seed: u64,
    /// ChaCha word position, as a decimal string.
    pub rng_word_pos: String,
    pub cursor: usize,
    pub perm: Vec<usize>,
    pub best_loss: f64,
    pub best_params: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).expect("state serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub struct TrainOutcome {
    pub model: EnergyModel,
    pub best: EnergyModel,
    pub log: Vec<LogRow>,
    pub state: TrainState,
}

struct Sampler<'a> {
    data: &'a DataSource,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    cursor: usize,
}

impl Sampler<'_> {
    fn draw_dataset(&mut self, x: &Array2<f64>, n: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n, x.ncols()));
        for i in 0..n {
            if self.cursor == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.row_mut(i).assign(&x.row(self.perm[self.cursor]));
            self.cursor += 1;
        }
        out
    }

    fn endpoints(&mut self, n: usize, interpolant: bool) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        match self.data {
            DataSource::Oracle { m0, m1 } => {
                let x0 = m0.sample(n, &mut self.rng);
                let x1 = if interpolant {
                    let m1 = m1
                        .as_ref()
                        .ok_or_else(|| Error::Config("interpolant training needs a second mixture".into()))?;
                    Some(m1.sample(n, &mut self.rng))
                } else {
                    None
                };
                Ok((x0, x1))
            }
            DataSource::Dataset { x0, x1 } => {
                let a = self.draw_dataset(x0, n);
                let b = if interpolant {
                    let x1 = x1
                        .as_ref()
                        .ok_or_else(|| Error::Config("interpolant training needs a second dataset".into()))?;
                    let idx: Vec<usize> = (0..n)
                        .map(|_| rand::Rng::gen_range(&mut self.rng, 0..x1.nrows()))
                        .collect();
                    Some(x1.select(Axis(0), &idx))
                } else {
                    None
                };
                Ok((a, b))
            }
        }
    }

    fn noisy(&mut self, process: &Process, n: usize, antithetic: bool, times: DsmTimes) -> Result<NoisyBatch> {
        let si = matches!(process, Process::Si { .. });
        let half = if antithetic { n / 2 } else { n };
        let (x0, x1) = self.endpoints(half, si)?;
        let b = match (times, process) {
            (DsmTimes::LogNormalSigma { mean, std }, Process::Dm(sched)) => {
                let eps = process.eps();
                let mut t = Vec::with_capacity(half);
                while t.len() < half {
                    let u: f64 = self.rng.sample(StandardNormal);
                    let s = sched.time_of_sigma((mean + std * u).exp())?;
                    if (eps..=1.0 - eps).contains(&s) {
                        t.push(s);
                    }
                }
                let z = crate::math::standard_normal(&mut self.rng, half, x0.ncols());
                process.noisy(&t, x0.view(), None, z)?
            }
            _ => sample_noisy(process, x0.view(), x1.as_ref().map(|a| a.view()), &mut self.rng)?,
        };
        Ok(if antithetic { b.antithetic() } else { b })
    }

    fn clf(&mut self, process: &Process, n_classes: usize, per_class: usize) -> Result<ClfBatch> {
        let si = matches!(process, Process::Si { .. });
        let times = sample_distinct_times(&mut self.rng, n_classes, process.eps());
        let mut samples = Vec::with_capacity(n_classes);
        for t in &times {
            let (x0, x1) = self.endpoints(per_class, si)?;
            let z = crate::math::standard_normal(&mut self.rng, per_class, x0.ncols());
            let b = process.noisy(&vec![*t; per_class], x0.view(), x1.as_ref().map(|a| a.view()), z)?;
            samples.push(b.y());
        }
        ClfBatch::new(times, samples)
    }
}

fn split_rows(b: &NoisyBatch, k: usize) -> Vec<NoisyBatch> {
    let n = b.len() / k;
    (0..k)
        .map(|c| {
            let r = c * n..(c + 1) * n;
            NoisyBatch {
                t: b.t[r.clone()].to_vec(),
                anchor: b.anchor.slice(ndarray::s![r.clone(), ..]).to_owned(),
                anchor_dot: b.anchor_dot.slice(ndarray::s![r.clone(), ..]).to_owned(),
                z: b.z.slice(ndarray::s![r.clone(), ..]).to_owned(),
                gamma: b.gamma[r.clone()].to_vec(),
                gamma_dot: b.gamma_dot[r].to_vec(),
            }
        })
        .collect()
}

/// Split a joint batch into `k` equal shards, or `None` if it does not divide.
fn shard(batch: &JointBatch, k: usize) -> Option<Vec<JointBatch>> {
    let ok = batch.dsm.as_ref().map_or(true, |b| b.len() % k == 0)
        && batch.ctsm.as_ref().map_or(true, |b| b.len() % k == 0)
        && batch.clf.as_ref().map_or(true, |b| b.per_class() % k == 0);
    if !ok {
        return None;
    }
    let dsm = batch.dsm.as_ref().map(|b| split_rows(b, k));
    let ctsm = batch.ctsm.as_ref().map(|b| split_rows(b, k));
    Some(
        (0..k)
            .map(|c| JointBatch {
                dsm: dsm.as_ref().map(|v| v[c].clone()),
                ctsm: ctsm.as_ref().map(|v| v[c].clone()),
                clf: batch.clf.as_ref().map(|b| {
                    let m = b.per_class() / k;
                    ClfBatch {
                        times: b.times.clone(),
                        samples: b
                            .samples
                            .iter()
                            .map(|s| s.slice(ndarray::s![c * m..(c + 1) * m, ..]).to_owned())
                            .collect(),
                    }
                }),
            })
            .collect(),
    )
}

/// Evaluate the joint loss, sharding the batch over `workers` threads when
/// it divides evenly. Shards are reduced in index order.
pub fn evaluate_step(model: &EnergyModel, batch: &JointBatch, workers: usize) -> Result<LossValue> {
    if workers <= 1 {
        return joint_loss(model, batch);
    }
    let Some(shards) = shard(batch, workers) else {
        return joint_loss(model, batch);
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let parts: Vec<Result<LossValue>> = pool.install(|| shards.par_iter().map(|b| joint_loss(model, b)).collect());
    let parts: Vec<LossValue> = parts.into_iter().collect::<Result<_>>()?;
    let w = 1.0 / workers as f64;
    let mut out = parts[0].clone();
    out.value *= w;
    out.components.iter_mut().for_each(|c| c.1 *= w);
    out.grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= w));
    for p in &parts[1..] {
        out.value += w * p.value;
        for (c, pc) in out.components.iter_mut().zip(&p.components) {
            c.1 += w * pc.1;
        }
        for (g, pg) in out.grads.iter_mut().zip(&p.grads) {
            g.data.iter_mut().zip(&pg.data).for_each(|(a, b)| *a += w * b);
        }
    }
    Ok(out)
}

fn to_vecs(p: &[Tensor]) -> Vec<Vec<f64>> {
    p.iter().map(|t| t.data.clone()).collect()
}

fn from_vecs(model: &EnergyModel, v: &[Vec<f64>]) -> Result<Vec<Tensor>> {
    let shapes = model.spec().param_shapes();
    if v.len() != shapes.len() || v.iter().zip(&shapes).any(|(a, (r, c))| a.len() != r * c) {
        return Err(Error::Shape("saved parameters do not match the model".into()));
    }
    Ok(v.iter()
        .zip(shapes)
        .map(|(d, (r, c))| Tensor::new(r, c, d.clone()))
        .collect())
}

pub fn train(config: &TrainConfig, data: &DataSource) -> Result<TrainOutcome> {
    train_from(config, data, None)
}

/// Run (or continue, given a saved state) a training job.
pub fn train_from(config: &TrainConfig, data: &DataSource, resume: Option<TrainState>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.dim() != config.spec.d {
        return Err(Error::dims(config.spec.d, data.dim()));
    }
    let mut model = EnergyModel::new(config.spec, config.seed)?;
    let n_data = match data {
        DataSource::Dataset { x0, .. } => x0.nrows(),
        DataSource::Oracle { .. } => 0,
    };
    let mut sampler = Sampler {
        data,
        rng: stream_rng(config.seed, 1),
        perm: (0..n_data).collect(),
        cursor: n_data,
    };
    let mut adam = AdamState::new(model.params(), config.beta1, config.beta2, config.adam_eps);
    let mut start = 0;
    let mut best_loss = f64::INFINITY;
    let mut best = model.clone();
    if let Some(st) = resume {
        model.set_params(from_vecs(&model, &st.params)?)?;
        best.set_params(from_vecs(&model, &st.best_params)?)?;
        adam = st.adam;
        sampler.rng = stream_rng(st.rng_seed, 1);
        let pos: u128 = st
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Config("bad RNG position in saved state".into()))?;
        sampler.rng.set_word_pos(pos);
        sampler.perm = st.perm;
        sampler.cursor = st.cursor;
        start = st.step;
        best_loss = st.best_loss;
    }

    let total = config.warmup_steps + config.steps;
    let per_class = config.batch_size / config.n_classes.max(1);
    let mut log = Vec::new();
    let clock = Instant::now();
    let mut log_file = match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("train_log.csv");
            let mut f = if start == 0 {
                let mut f = std::fs::File::create(&path)?;
                writeln!(f, "{LOG_HEADER}")?;
                f
            } else {
                std::fs::OpenOptions::new().append(true).open(&path)?
            };
            f.flush()?;
            Some(f)
        }
        None => None,
    };

    for step in start..total {
        let warm = step < config.warmup_steps;
        let set = if warm { LossSet::DSM } else { config.losses };
        let mut batch = JointBatch::default();
        if set.dsm {
            batch.dsm = Some(sampler.noisy(&config.process, config.batch_size, config.antithetic, config.dsm_times)?);
        }
        if set.clf {
            batch.clf = Some(sampler.clf(&config.process, config.n_classes, per_class)?);
        }
        if set.ctsm {
            let mut b = sampler.noisy(&config.process, config.batch_size, config.antithetic, DsmTimes::Uniform)?;
            // gamma' vanishes at the interpolant midpoint; drop such rows.
            if b.gamma_dot.iter().any(|g| *g == 0.0) {
                let keep: Vec<usize> = (0..b.len()).filter(|&i| b.gamma_dot[i] != 0.0).collect();
                b = NoisyBatch {
                    t: keep.iter().map(|&i| b.t[i]).collect(),
                    anchor: b.anchor.select(Axis(0), &keep),
                    anchor_dot: b.anchor_dot.select(Axis(0), &keep),
                    z: b.z.select(Axis(0), &keep),
                    gamma: keep.iter().map(|&i| b.gamma[i]).collect(),
                    gamma_dot: keep.iter().map(|&i| b.gamma_dot[i]).collect(),
                };
            }
            batch.ctsm = Some(b);
        }
        let lv = evaluate_step(&model, &batch, config.workers).map_err(|e| match e {
            Error::NonFinite { op, .. } => Error::NonFinite { op, step: Some(step + 1) },
            other => other,
        })?;
        if !lv.value.is_finite() || lv.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: "loss".into(),
                step: Some(step + 1),
            });
        }
        adam_step(model.params_mut(), &lv.grads, &mut adam, config.lr_at(step));
        let done = step + 1;
        if done % config.log_every == 0 || done == total {
            let row = LogRow {
                step: done,
                loss_total: lv.value,
                loss_dsm: lv.component("dsm"),
                loss_clf: lv.component("clf"),
                loss_ctsm: lv.component("ctsm"),
                grad_norm: lv.grad_norm(),
                wall_ms: if config.log_wall_time {
                    clock.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            if !warm && lv.value < best_loss {
                best_loss = lv.value;
                best = model.clone();
            }
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", row.to_csv())?;
            }
            log.push(row);
        }
    }
    if best_loss == f64::INFINITY {
        best = model.clone();
    }

    let state = TrainState {
        step: total.max(start),
        params: to_vecs(model.params()),
        adam,
        rng_seed: config.seed,
        rng_word_pos: sampler.rng.get_word_pos().to_string(),
        cursor: sampler.cursor,
        perm: sampler.perm,
        best_loss,
        best_params: to_vecs(best.params()),
    };
    if let Some(dir) = &config.out_dir {
        model.save(&dir.join("final.ckpt"))?;
        best.save(&dir.join("best.ckpt"))?;
        state.save(&dir.join("state.json"))?;
    }
    Ok(TrainOutcome {
        model,
        best,
        log,
        state,
    })
}
