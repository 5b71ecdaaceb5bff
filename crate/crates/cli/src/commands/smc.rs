use anyhow::Result;
use ebdl_core::density::{AtTime, Composed, CompositionOp};
use ebdl_core::losses::Process;
use ebdl_core::math::{linspace, logsumexp, stream_rng};
use ebdl_core::metrics::{self, mode_tv_weighted};
use ebdl_core::samplers::{smc_classic, smc_diffusion, ParticleSystem, SiKernels, SmcConfig, SmcResult};
use ebdl_core::{GaussianMixture, Target, TimeDensity};
use ndarray::Array2;

use crate::config::{config_err, Config};
use crate::output::{prepare, write_samples, write_summary};
use crate::setup::{self, Density};
use crate::Op;

fn smc_config(cfg: &Config) -> Result<SmcConfig> {
    let alpha = cfg.f64("alpha")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(SmcConfig {
        alpha,
        mala_steps: cfg.usize("mala_steps")?,
        init_step: cfg.f64("mala_step")?,
        adapt: cfg.bool("mala_adapt")?,
        record_levels: false,
    })
}

/// `K + 1` increasing level times on `[smc_t_min, smc_t_max]`.
fn level_times(cfg: &Config) -> Result<Vec<f64>> {
    let (lo, hi, k) = (cfg.f64("smc_t_min")?, cfg.f64("smc_t_max")?, cfg.usize("levels")?);
    if !(0.0 <= lo && lo < hi && hi <= 1.0) || k == 0 {
        return Err(config_err("SMC needs 0 <= smc_t_min < smc_t_max <= 1 and levels >= 1"));
    }
    Ok(linspace(lo, hi, k + 1))
}

fn particles(cfg: &Config) -> Result<usize> {
    let n = cfg.usize("n_particles")?;
    if n == 0 {
        return Err(config_err("n_particles must be >= 1"));
    }
    Ok(n)
}

fn summary(r: &SmcResult) -> Vec<(&'static str, f64)> {
    let n = r.system.len() as f64;
    let acc: Vec<f64> = r.acceptance.iter().copied().filter(|a| a.is_finite()).collect();
    vec![
        ("final_ess", r.ess_history.last().copied().unwrap_or(n) / n),
        ("min_ess", r.ess_history.iter().copied().fold(n, f64::min) / n),
        ("n_resample", r.n_resample as f64),
        ("log_normalizer", r.log_normalizer),
        ("final_step", r.final_step),
        (
            "mean_acceptance",
            if acc.is_empty() { f64::NAN } else { acc.iter().sum::<f64>() / acc.len() as f64 },
        ),
    ]
}

/// Variance of an isotropic Gaussian wide enough to cover both mixtures at
/// time `t`. Particles start from it with importance weights.
fn start_variance(process: &Process, t: f64, a: &GaussianMixture, b: &GaussianMixture) -> Result<f64> {
    let second = |m: &GaussianMixture| {
        let (mean, var) = m.moments();
        mean.iter().zip(&var).map(|(m, v)| m * m + v).fold(0.0, f64::max)
    };
    let m2 = second(a).max(second(b));
    Ok(match process {
        Process::Dm(sched) => {
            let e = sched.eval(t)?;
            e.s * e.s * m2 + e.gamma * e.gamma
        }
        Process::Si { amp } => (1.0 - t) * (1.0 - t) * m2 + t * t + amp * t * (1.0 - t),
    })
}

/// The configured log normalizer, or with `auto` an importance-sampling
/// estimate at time `t` from an isotropic Gaussian of variance `var`.
fn log_normalizer(cfg: &Config, key: &str, density: &Density, t: f64, var: f64) -> Result<f64> {
    if cfg.str(key) != "auto" {
        return cfg.f64(key);
    }
    if let Density::Flat(_) = density {
        return Err(config_err(format!("{key} = auto needs a normalizable density")));
    }
    let d = density.as_time_density().dim();
    let q = GaussianMixture::isotropic(vec![1.0], Array2::zeros((1, d)), var)?;
    let n = 20_000;
    let x = q.sample(n, &mut stream_rng(cfg.u64("seed")?, 305));
    let lp = density.as_time_density().log_density(t, x.view())?;
    let lq = q.log_density_batch(x.view())?;
    let lw: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
    Ok(logsumexp(&lw) - (n as f64).ln())
}

pub fn compose(cfg: &Config, ckpt_a: &str, ckpt_b: &str, op: Op) -> Result<()> {
    let dir = prepare(cfg)?;
    let process = setup::process(cfg)?;
    let (ma, mb) = setup::mixtures(cfg)?;
    let base = GaussianMixture::standard_normal(ma.dim());
    let fam_a = process.family(&ma, &base);
    let fam_b = process.family(&mb, &base);
    let da = Density::open(ckpt_a, &fam_a)?;
    let db = Density::open(ckpt_b, &fam_b)?;
    let times = level_times(cfg)?;
    let cover = start_variance(&process, times[0], &ma, &mb)?;
    let composed = Composed {
        a: da.as_time_density(),
        b: db.as_time_density(),
        op: match op {
            Op::And => CompositionOp::And,
            Op::Or => CompositionOp::Or,
        },
        log_z: [
            log_normalizer(cfg, "log_z_a", &da, times[0], cover)?,
            log_normalizer(cfg, "log_z_b", &db, times[0], cover)?,
        ],
    };
    let levels: Vec<AtTime<Composed>> = times.iter().map(|t| AtTime { density: &composed, t: *t }).collect();
    let targets: Vec<&dyn Target> = levels.iter().map(|l| l as &dyn Target).collect();

    let n = particles(cfg)?;
    let seed = cfg.u64("seed")?;
    let t_top = times[times.len() - 1];
    let var = start_variance(&process, t_top, &ma, &mb)?;
    let start = GaussianMixture::isotropic(vec![1.0], Array2::zeros((1, ma.dim())), var)?;
    let x = start.sample(n, &mut stream_rng(seed, 301));
    let mut sys = ParticleSystem::new(x.clone(), seed);
    let lt = targets[targets.len() - 1].log_density(x.view())?;
    let lq = start.log_density_batch(x.view())?;
    sys.log_weights = lt.iter().zip(&lq).map(|(a, b)| a - b).collect();

    let r = smc_classic(&targets, sys, &smc_config(cfg)?)?;
    let reference = match (op, &da, &db) {
        (Op::Or, Density::Flat(_), _) | (Op::Or, _, Density::Flat(_)) => {
            return Err(config_err("a flat density cannot enter an OR composition"));
        }
        (Op::And, Density::Flat(_), _) => mb,
        (Op::And, _, Density::Flat(_)) => ma,
        (Op::And, _, _) => ma.product(&mb)?,
        (Op::Or, _, _) => ma.or_composition(&mb)?,
    };
    let w = r.system.normalized_weights();
    let tv = mode_tv_weighted(r.system.positions.view(), &w, &reference)?;
    write_samples(&dir.join("samples.csv"), r.system.positions.view(), &r.system.log_weights)?;
    let mut pairs = vec![("mode_tv", tv), ("log_z_a", composed.log_z[0]), ("log_z_b", composed.log_z[1])];
    pairs.extend(summary(&r));
    write_summary(&dir.join("summary.csv"), &pairs)?;
    println!("mode_tv {tv:.4}, {} resampling events", r.n_resample);
    Ok(())
}

pub fn smc_bg(cfg: &Config, checkpoint: &str) -> Result<()> {
    let dir = prepare(cfg)?;
    let process = setup::process(cfg)?;
    let Process::Si { amp } = process else {
        return Err(config_err("smc-bg runs along an interpolant; set process = si"));
    };
    let fam = setup::family(cfg)?;
    let density = Density::open(checkpoint, &fam)?;
    let times = level_times(cfg)?;
    let model = density.as_time_density();
    let mut levels: Vec<AtTime<dyn TimeDensity>> = times.iter().map(|t| AtTime { density: model, t: *t }).collect();
    if cfg.bool("pin_target")? {
        levels[0] = AtTime { density: &fam as &dyn TimeDensity, t: times[0] };
    }
    let targets: Vec<&dyn Target> = levels.iter().map(|l| l as &dyn Target).collect();
    let score: &dyn TimeDensity = match cfg.choice("kernel_score", &["oracle", "model"])? {
        "oracle" => &fam,
        _ => model,
    };
    let kernels = SiKernels {
        velocity: &fam,
        score,
        amp,
        g: cfg.f64("smc_g")?,
    };

    let n = particles(cfg)?;
    let seed = cfg.u64("seed")?;
    let t_top = times[times.len() - 1];
    let start = fam.at(t_top)?;
    let x = start.sample(n, &mut stream_rng(seed, 302));
    let mut sys = ParticleSystem::new(x.clone(), seed);
    let lt = targets[targets.len() - 1].log_density(x.view())?;
    let lq = start.log_density_batch(x.view())?;
    sys.log_weights = lt.iter().zip(&lq).map(|(a, b)| a - b).collect();

    let r = smc_diffusion(&targets, &times, &kernels, sys, &smc_config(cfg)?)?;
    let data = fam.at(times[0])?;
    let n_ref = n.max(2);
    let n_proj = cfg.usize("n_proj")?;
    let mut rng = stream_rng(seed, 303);
    let direct = data.sample(n_ref, &mut rng);
    let other = data.sample(n, &mut rng);
    let w = r.system.normalized_weights();
    let flat = vec![1.0 / n_ref as f64; n_ref];
    let mut prng = stream_rng(seed, 304);
    let sw2 = metrics::sliced_w2_weighted(r.system.positions.view(), &w, direct.view(), &flat, n_proj, &mut prng)?;
    let ks = metrics::sliced_ks_weighted(r.system.positions.view(), &w, direct.view(), &flat, n_proj, &mut prng)?;
    let null = metrics::sliced_w2(other.view(), direct.view(), n_proj, &mut prng)?;
    write_samples(&dir.join("samples.csv"), r.system.positions.view(), &r.system.log_weights)?;
    let mut pairs = vec![("sliced_w2", sw2), ("sliced_ks", ks), ("direct_sliced_w2", null)];
    pairs.extend(summary(&r));
    write_summary(&dir.join("summary.csv"), &pairs)?;
    println!("sliced_w2 {sw2:.4} (direct sampling {null:.4})");
    Ok(())
}
