use std::path::Path;

use anyhow::Result;
use ebdl_core::losses::Process;
use ebdl_core::math::{linspace, stream_rng};
use ebdl_core::metrics::{self, evaluate, EvalConfig, GlobalRow, TimeRow, GLOBAL_HEADER, TIME_HEADER};
use ebdl_core::samplers::{dm_denoise, si_integrate, Direction, SiKernels};
use ebdl_core::trainer::{self, DataSource};
use ebdl_core::{GaussianMixture, MarginalFamily, TimeDensity};
use ndarray::Array2;

use crate::config::{config_err, Config};
use crate::output::{num, prepare, write_csv, write_samples};
use crate::setup::{self, Density};

pub fn train(cfg: &Config) -> Result<()> {
    let dir = prepare(cfg)?;
    let (m0, m1) = setup::mixtures(cfg)?;
    let mut tc = setup::train_config(cfg, m0.dim())?;
    tc.out_dir = Some(dir.clone());
    let data = DataSource::Oracle {
        m0: m0.clone(),
        m1: matches!(tc.process, Process::Si { .. }).then(|| m1.clone()),
    };
    let out = trainer::train(&tc, &data)?;
    if let Some(last) = out.log.last() {
        println!("step {} loss {:.6}", last.step, last.loss_total);
    }
    if cfg.bool("train_eval")? {
        let fam = tc.process.family(&m0, &m1);
        let rows = time_rows(cfg, &out.model, &fam)?;
        write_time_rows(&dir.join("metrics.csv"), &rows)?;
        println!("grid clf {:.6}", metrics::grid_clf(&rows));
    }
    Ok(())
}

pub fn eval(cfg: &Config, checkpoint: &str) -> Result<()> {
    let dir = prepare(cfg)?;
    let (m0, _) = setup::mixtures(cfg)?;
    let process = setup::process(cfg)?;
    let fam = setup::family(cfg)?;
    let density = Density::open(checkpoint, &fam)?;
    let rows = time_rows(cfg, density.as_time_density(), &fam)?;
    write_time_rows(&dir.join("eval.csv"), &rows)?;
    if cfg.bool("eval_global")? {
        let x = generate(cfg, density.as_time_density(), &fam, &process)?;
        let g = global_row(cfg, x.view(), &m0)?;
        let row = vec![num(g.mmd), num(g.sliced_w2), num(g.sliced_ks), num(g.mode_tv)];
        write_csv(&dir.join("eval_global.csv"), &GLOBAL_HEADER, &[row])?;
    }
    println!("grid clf {:.6} over {} times", metrics::grid_clf(&rows), rows.len());
    Ok(())
}

pub fn sample(cfg: &Config, checkpoint: &str) -> Result<()> {
    let dir = prepare(cfg)?;
    let process = setup::process(cfg)?;
    let fam = setup::family(cfg)?;
    let density = Density::open(checkpoint, &fam)?;
    let x = generate(cfg, density.as_time_density(), &fam, &process)?;
    write_samples(&dir.join("samples.csv"), x.view(), &vec![0.0; x.nrows()])?;
    println!("{} samples", x.nrows());
    Ok(())
}

fn time_rows(cfg: &Config, density: &dyn TimeDensity, fam: &MarginalFamily) -> Result<Vec<TimeRow>> {
    let ec = EvalConfig {
        grid: setup::eval_grid(cfg)?,
        samples: cfg.usize("eval_samples")?,
    };
    Ok(evaluate(density, fam, &ec, &mut stream_rng(cfg.u64("seed")?, 101))?)
}

fn write_time_rows(path: &Path, rows: &[TimeRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![num(r.t), num(r.clf_loss), num(r.fisher_div), num(r.ess_pct), num(r.r2)])
        .collect();
    write_csv(path, &TIME_HEADER, &rows)
}

/// Samples at the data end by reverse integration with the density's score.
/// Interpolants use the exact velocity of the configured mixtures.
fn generate(cfg: &Config, density: &dyn TimeDensity, fam: &MarginalFamily, process: &Process) -> Result<Array2<f64>> {
    let n = cfg.usize("n_particles")?;
    let steps = cfg.usize("sampler_steps")?;
    let t_min = cfg.f64("sampler_t_min")?;
    let seed = cfg.u64("seed")?;
    if steps == 0 || !(0.0..0.5).contains(&t_min) {
        return Err(config_err("sampler needs sampler_steps >= 1 and 0 <= sampler_t_min < 0.5"));
    }
    match process {
        Process::Dm(sched) => Ok(dm_denoise(density, sched, &linspace(1.0, t_min, steps + 1), n, seed)?),
        Process::Si { amp } => {
            let grid = linspace(1.0 - t_min.max(1e-3), t_min, steps + 1);
            let x0 = fam.at(grid[0])?.sample(n, &mut stream_rng(seed, 103));
            let kernels = SiKernels {
                velocity: fam,
                score: density,
                amp: *amp,
                g: cfg.f64("sampler_g")?,
            };
            Ok(si_integrate(&kernels, &grid, Direction::Backward, x0, seed)?)
        }
    }
}

fn global_row(cfg: &Config, x: ndarray::ArrayView2<f64>, data: &GaussianMixture) -> Result<GlobalRow> {
    let seed = cfg.u64("seed")?;
    let n_proj = cfg.usize("n_proj")?;
    let reference = data.sample(x.nrows(), &mut stream_rng(seed, 102));
    let mut rng = stream_rng(seed, 104);
    Ok(GlobalRow {
        mmd: metrics::mmd(x, reference.view())?,
        sliced_w2: metrics::sliced_w2(x, reference.view(), n_proj, &mut rng)?,
        sliced_ks: metrics::sliced_ks(x, reference.view(), n_proj, &mut rng)?,
        mode_tv: metrics::mode_tv(x, data)?,
    })
}
