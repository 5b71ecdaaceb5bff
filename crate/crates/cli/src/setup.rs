//! Turning a [`Config`] into core objects.

use std::path::Path;

use anyhow::{Context, Result};
use ebdl_core::density::Flat;
use ebdl_core::losses::Process;
use ebdl_core::math::linspace;
use ebdl_core::trainer::{DsmTimes, LossSet, TrainConfig};
use ebdl_core::{EnergyModel, GaussianMixture, MarginalFamily, ModelSpec, NoisingSchedule, TimeDensity};
use ndarray::{Array1, Axis};

use crate::config::{config_err, Config};

pub fn named_mixture(cfg: &Config, name: &str) -> Result<GaussianMixture> {
    let d = cfg.usize("dim")?;
    let pair = || -> Result<(GaussianMixture, GaussianMixture)> {
        Ok(GaussianMixture::composition_pair(cfg.f64("composition_sep")?, cfg.f64("composition_var")?))
    };
    let m = match name {
        "mog2" => GaussianMixture::mog2(d),
        "mog40" => GaussianMixture::mog40(d, cfg.u64("mixture_seed")?),
        "normal" => GaussianMixture::standard_normal(d),
        "composition_a" => pair()?.0,
        "composition_b" => pair()?.1,
        other => match other.strip_prefix("file:") {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_err(format!("cannot read mixture table {path}: {e}")))?;
                GaussianMixture::from_table(&text)?
            }
            None => return Err(config_err(format!("unknown mixture `{other}`"))),
        },
    };
    Ok(m)
}

/// Applies `x -> (x - mean) / std` to a mixture.
fn affine(m: &GaussianMixture, mean: &Array1<f64>, std: &Array1<f64>) -> Result<GaussianMixture> {
    let means = (m.means() - &mean.view().insert_axis(Axis(0))) / &std.view().insert_axis(Axis(0));
    let vars = m.vars() / &std.mapv(|s| s * s).view().insert_axis(Axis(0));
    Ok(GaussianMixture::new(m.weights().to_vec(), means, vars)?)
}

/// The two configured mixtures, standardized together when asked.
pub fn mixtures(cfg: &Config) -> Result<(GaussianMixture, GaussianMixture)> {
    let a = named_mixture(cfg, cfg.str("mixture"))?;
    let b = named_mixture(cfg, cfg.str("mixture_b"))?;
    if a.dim() != b.dim() {
        return Err(config_err(format!("mixtures have dimensions {} and {}", a.dim(), b.dim())));
    }
    if !cfg.bool("standardize")? {
        return Ok((a, b));
    }
    let (a_std, mean, std) = a.standardized();
    let b_std = if cfg.str("mixture_b") == "normal" { b } else { affine(&b, &mean, &std)? };
    Ok((a_std, b_std))
}

pub fn process(cfg: &Config) -> Result<Process> {
    Ok(match cfg.choice("process", &["vp", "ve", "si"])? {
        "vp" => Process::Dm(NoisingSchedule::vp(cfg.f64("beta_min")?, cfg.f64("beta_max")?)),
        "ve" => Process::Dm(NoisingSchedule::ve(cfg.f64("sigma_min")?, cfg.f64("sigma_max")?)),
        _ => Process::Si { amp: cfg.f64("si_amp")? },
    })
}

pub fn family(cfg: &Config) -> Result<MarginalFamily> {
    let (a, b) = mixtures(cfg)?;
    Ok(process(cfg)?.family(&a, &b))
}

pub fn model_spec(cfg: &Config, d: usize) -> Result<ModelSpec> {
    let spec = ModelSpec {
        d,
        width: cfg.usize("width")?,
        depth: cfg.usize("depth")?,
        m: cfg.usize("emb_m")?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn train_config(cfg: &Config, d: usize) -> Result<TrainConfig> {
    let mut c = TrainConfig::new(process(cfg)?, model_spec(cfg, d)?);
    c.losses = LossSet::parse(cfg.str("losses"))?;
    c.n_classes = cfg.usize("n_classes")?;
    c.batch_size = cfg.usize("batch_size")?;
    c.steps = cfg.usize("steps")?;
    c.warmup_steps = cfg.usize("warmup_steps")?;
    c.lr = cfg.f64("lr")?;
    c.cosine_decay = cfg.choice("lr_schedule", &["constant", "cosine"])? == "cosine";
    c.beta1 = cfg.f64("beta1")?;
    c.beta2 = cfg.f64("beta2")?;
    c.adam_eps = cfg.f64("adam_eps")?;
    c.seed = cfg.u64("seed")?;
    c.log_every = cfg.usize("log_every")?;
    c.workers = cfg.usize("workers")?;
    c.log_wall_time = cfg.bool("log_wall_time")?;
    match cfg.choice("antithetic", &["auto", "true", "false"])? {
        "auto" => {}
        v => c.antithetic = v == "true",
    }
    c.dsm_times = match cfg.choice("dsm_times", &["uniform", "lognormal"])? {
        "uniform" => DsmTimes::Uniform,
        _ => DsmTimes::LogNormalSigma {
            mean: cfg.f64("dsm_sigma_mean")?,
            std: cfg.f64("dsm_sigma_std")?,
        },
    };
    c.validate()?;
    Ok(c)
}

/// A learned model, the exact marginals (`oracle`) or a constant energy
/// (`flat`).
pub enum Density {
    Model(EnergyModel),
    Oracle(MarginalFamily),
    Flat(Flat),
}

impl Density {
    pub fn open(spec: &str, fam: &MarginalFamily) -> Result<Self> {
        match spec {
            "oracle" => return Ok(Density::Oracle(fam.clone())),
            "flat" => return Ok(Density::Flat(Flat { d: fam.dim() })),
            _ => {}
        }
        let model = EnergyModel::load(Path::new(spec)).with_context(|| format!("loading checkpoint {spec}"))?;
        if model.dim() != fam.dim() {
            return Err(config_err(format!(
                "checkpoint {spec} has dimension {}, the config describes {}",
                model.dim(),
                fam.dim()
            )));
        }
        Ok(Density::Model(model))
    }

    pub fn as_time_density(&self) -> &dyn TimeDensity {
        match self {
            Density::Model(m) => m,
            Density::Oracle(f) => f,
            Density::Flat(f) => f,
        }
    }
}

pub fn eval_grid(cfg: &Config) -> Result<Vec<f64>> {
    let (lo, hi, k) = (cfg.f64("eval_t_min")?, cfg.f64("eval_t_max")?, cfg.usize("eval_points")?);
    if !(0.0 <= lo && lo < hi && hi <= 1.0) || k < 2 {
        return Err(config_err("evaluation grid needs 0 <= eval_t_min < eval_t_max <= 1 and eval_points >= 2"));
    }
    Ok(match cfg.choice("eval_spacing", &["linear", "log"])? {
        "linear" => linspace(lo, hi, k),
        _ => {
            if lo <= 0.0 {
                return Err(config_err("log spacing needs eval_t_min > 0"));
            }
            linspace(lo.ln(), hi.ln(), k).into_iter().map(f64::exp).collect()
        }
    })
}
