use anyhow::Result;
use ebdl_core::density::AtTime;
use ebdl_core::losses::{diffclf_value_of, tsm_gap, ClfBatch};
use ebdl_core::math::{linspace, stream_rng};
use ebdl_core::metrics::fisher_divergence;
use ebdl_core::GaussianMixture;
use ndarray::arr2;

use crate::config::{config_err, Config};
use crate::output::{num, prepare, write_csv};
use crate::setup;

pub const HEADER: [&str; 4] = ["weight", "fisher_div", "time_score_gap", "clf_gap"];

/// Two 1-D modes at `-sep` and `+sep` with left weight `w`.
fn two_modes(w: f64, sep: f64, var: f64) -> Result<GaussianMixture> {
    Ok(GaussianMixture::isotropic(vec![w, 1.0 - w], arr2(&[[-sep], [sep]]), var)?)
}

/// Sweeps the left-mode weight and reports, against the reference mixture,
/// the Fisher divergence and mean squared time-score gap at `blind_t`, and
/// the excess classification loss over the noise levels.
pub fn blindness(cfg: &Config) -> Result<()> {
    let dir = prepare(cfg)?;
    let process = setup::process(cfg)?;
    let (r, sep, var) = (cfg.f64("blind_ref_weight")?, cfg.f64("blind_sep")?, cfg.f64("blind_var")?);
    let (points, n_times, n) = (cfg.usize("blind_points")?, cfg.usize("blind_times")?, cfg.usize("blind_samples")?);
    if !(0.0 < r && r < 1.0) || points < 2 || n_times < 2 || n < 2 {
        return Err(config_err("blindness needs 0 < blind_ref_weight < 1 and at least 2 points, times and samples"));
    }
    let t0 = cfg.f64("blind_t")?;
    if !(0.0..1.0).contains(&t0) {
        return Err(config_err("blind_t must lie in [0, 1)"));
    }
    let seed = cfg.u64("seed")?;
    let base = GaussianMixture::standard_normal(1);
    let reference = two_modes(r, sep, var)?;
    let ref_fam = process.family(&reference, &base);
    let eps = process.eps();
    let times = linspace(eps, 1.0 - eps, n_times);

    let mut rng = stream_rng(seed, 201);
    let x0 = ref_fam.at(t0)?.sample(n, &mut rng);
    let batch = ClfBatch::from_family(&ref_fam, times.clone(), n, &mut rng)?;
    let ref_clf = diffclf_value_of(&ref_fam, &batch)?;
    let ref_t0 = AtTime { density: &ref_fam, t: t0 };

    let mut rows = Vec::with_capacity(points);
    for w in linspace(0.2, 0.8, points) {
        let fam = process.family(&two_modes(w, sep, var)?, &base);
        let fd = fisher_divergence(&AtTime { density: &fam, t: t0 }, &ref_t0, x0.view())?;
        let tsm = tsm_gap(&fam, &ref_fam, t0, x0.view())?;
        let clf = diffclf_value_of(&fam, &batch)? - ref_clf;
        rows.push(vec![num(w), num(fd), num(tsm), num(clf)]);
    }
    write_csv(&dir.join("blindness.csv"), &HEADER, &rows)?;
    println!("{} weights", rows.len());
    Ok(())
}
