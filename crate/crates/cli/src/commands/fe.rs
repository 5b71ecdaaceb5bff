use anyhow::Result;
use ebdl_core::free_energy::{bar, fep, mbar_solve, ti_estimate, Estimate, MbarProblem, PotentialPath, CSV_HEADER};
use ebdl_core::math::{linspace, stream_rng};
use ebdl_core::{EnergyModel, MarginalFamily};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::config::{config_err, Config};
use crate::output::{num, prepare, write_csv};
use crate::setup::{self, Density};

/// `exp(-|x - mu|^2 / 2v)` with mean and variance interpolated linearly
/// between two isotropic Gaussians.
struct GaussPath {
    mean_a: Array1<f64>,
    mean_b: Array1<f64>,
    var_a: f64,
    var_b: f64,
}

impl GaussPath {
    fn at(&self, t: f64) -> (Array1<f64>, f64) {
        (&self.mean_a * (1.0 - t) + &self.mean_b * t, (1.0 - t) * self.var_a + t * self.var_b)
    }

    /// `log Z_B - log Z_A`.
    fn exact(&self) -> f64 {
        0.5 * self.mean_a.len() as f64 * (self.var_b / self.var_a).ln()
    }
}

impl PotentialPath for GaussPath {
    fn energy(&self, t: f64, x: ArrayView2<f64>) -> ebdl_core::Result<Vec<f64>> {
        let (m, v) = self.at(t);
        Ok(x
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * v))
            .collect())
    }

    fn sample(&self, t: f64, n: usize, seed: u64) -> ebdl_core::Result<Array2<f64>> {
        let (m, v) = self.at(t);
        let mut rng = stream_rng(seed, 401);
        let sd = v.sqrt();
        Ok(Array2::from_shape_fn((n, m.len()), |(_, j)| {
            m[j] + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        }))
    }
}

/// The model energy without its free-energy head, sampled through the exact
/// marginals of the configured mixtures.
struct ModelPath<'a> {
    model: &'a EnergyModel,
    fam: &'a MarginalFamily,
}

impl PotentialPath for ModelPath<'_> {
    fn energy(&self, t: f64, x: ArrayView2<f64>) -> ebdl_core::Result<Vec<f64>> {
        self.model.energy(&vec![t; x.nrows()], x)
    }

    fn sample(&self, t: f64, n: usize, seed: u64) -> ebdl_core::Result<Array2<f64>> {
        Ok(self.fam.at(t)?.sample(n, &mut stream_rng(seed, 402)))
    }
}

/// Parses `gauss:<m1,m2,..>:<var>`.
fn parse_potential(spec: &str) -> Result<(Array1<f64>, f64)> {
    let bad = || config_err(format!("malformed potential `{spec}`, expected gauss:<mean,..>:<var>"));
    let mut parts = spec.split(':');
    if parts.next() != Some("gauss") {
        return Err(bad());
    }
    let mean: Vec<f64> = parts
        .next()
        .ok_or_else(bad)?
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let var: f64 = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    if parts.next().is_some() || !(var > 0.0 && var.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
        return Err(bad());
    }
    Ok((Array1::from(mean), var))
}

fn estimates(cfg: &Config, path: &dyn PotentialPath) -> Result<Vec<Estimate>> {
    let seed = cfg.u64("seed")?;
    let n = cfg.usize("fe_samples")?;
    let (n_grid, n_states) = (cfg.usize("fe_grid")?, cfg.usize("fe_states")?);
    if n < 2 || n_grid < 2 || n_states < 2 {
        return Err(config_err("free energies need fe_samples, fe_grid and fe_states >= 2"));
    }
    let xa = path.sample(0.0, n, seed.wrapping_add(1))?;
    let xb = path.sample(1.0, n, seed.wrapping_add(2))?;
    let ua_a = path.energy(0.0, xa.view())?;
    let ub_a = path.energy(1.0, xa.view())?;
    let ua_b = path.energy(0.0, xb.view())?;
    let ub_b = path.energy(1.0, xb.view())?;
    let mut out = Vec::new();
    for name in cfg.str("fe_estimators").split(',').map(str::trim) {
        let e = match name {
            "fep" => fep(&ua_a, &ub_a)?,
            "bar" => {
                let w_f: Vec<f64> = ub_a.iter().zip(&ua_a).map(|(b, a)| b - a).collect();
                let w_r: Vec<f64> = ua_b.iter().zip(&ub_b).map(|(a, b)| a - b).collect();
                bar(&w_f, &w_r)?
            }
            "ti" => {
                let u0 = |x: ArrayView2<f64>| path.energy(0.0, x);
                let u1 = |x: ArrayView2<f64>| path.energy(1.0, x);
                let grid = linspace(0.0, 1.0, n_grid);
                ti_estimate(path, &u0, xa.view(), &u1, xb.view(), &grid, n, cfg.f64("fe_h")?, seed.wrapping_add(3))?
            }
            "mbar" => {
                let states = linspace(0.0, 1.0, n_states);
                let samples: Vec<Array2<f64>> = states
                    .iter()
                    .enumerate()
                    .map(|(k, t)| path.sample(*t, n, seed.wrapping_add(100 + k as u64)))
                    .collect::<ebdl_core::Result<_>>()?;
                let views: Vec<ArrayView2<f64>> = samples.iter().map(|s| s.view()).collect();
                let pooled = concatenate(Axis(0), &views)?;
                let mut energies = Array2::zeros((n_states, pooled.nrows()));
                for (k, t) in states.iter().enumerate() {
                    energies.row_mut(k).assign(&Array1::from(path.energy(*t, pooled.view())?));
                }
                let sol = mbar_solve(&MbarProblem::new(energies, vec![n; n_states])?, 1e-10, 10_000)?;
                Estimate {
                    estimator: "mbar".into(),
                    delta_f: sol.delta_f(0, n_states - 1),
                    stderr: sol.delta_f_stderr(0, n_states - 1),
                    n_samples: pooled.nrows(),
                    grid: n_states,
                }
            }
            other => return Err(config_err(format!("unknown estimator `{other}`"))),
        };
        out.push(e);
    }
    Ok(out)
}

fn exact_row(name: &str, delta_f: f64) -> Estimate {
    Estimate {
        estimator: name.into(),
        delta_f,
        stderr: 0.0,
        n_samples: 0,
        grid: 0,
    }
}

/// `log Z_B - log Z_A` between analytic Gaussian potentials, or between the
/// two ends of a trained model's energy.
pub fn free_energy(cfg: &Config, checkpoint: Option<&str>) -> Result<()> {
    let dir = prepare(cfg)?;
    let rows = match cfg.choice("fe_source", &["analytic", "checkpoint"])? {
        "analytic" => {
            let (mean_a, var_a) = parse_potential(cfg.str("potential_a"))?;
            let (mean_b, var_b) = parse_potential(cfg.str("potential_b"))?;
            if mean_a.len() != mean_b.len() {
                return Err(config_err("potentials have different dimensions"));
            }
            let path = GaussPath { mean_a, mean_b, var_a, var_b };
            let mut rows = estimates(cfg, &path)?;
            rows.push(exact_row("exact", path.exact()));
            rows
        }
        _ => {
            let spec = checkpoint.ok_or_else(|| config_err("fe_source = checkpoint needs --checkpoint"))?;
            let fam = setup::family(cfg)?;
            let Density::Model(model) = Density::open(spec, &fam)? else {
                return Err(config_err("fe_source = checkpoint needs a checkpoint file"));
            };
            let mut rows = estimates(cfg, &ModelPath { model: &model, fam: &fam })?;
            // exp(-U + F) is normalized when the head is exact, so F = -log Z.
            let f = model.free_energy(&[0.0, 1.0])?;
            rows.push(exact_row("free_head", f[0] - f[1]));
            rows
        }
    };
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|e| {
            vec![
                e.estimator.clone(),
                num(e.delta_f),
                num(e.stderr),
                e.n_samples.to_string(),
                e.grid.to_string(),
            ]
        })
        .collect();
    write_csv(&dir.join("free_energy.csv"), &header, &table)?;
    for e in &rows {
        println!("{:<10} {:>12.6} +- {:.6}", e.estimator, e.delta_f, e.stderr);
    }
    Ok(())
}
