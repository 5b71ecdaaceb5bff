use anyhow::Result;
use ebdl_core::grad::check::dot_product_tests;
use ebdl_core::grad::{set_fault, Fault};
use ebdl_core::losses::{gradient_check, CheckedLoss};
use ebdl_core::{EnergyModel, ModelSpec};

use super::CheckFailed;
use crate::config::Config;
use crate::output::{num, prepare, write_csv};

/// Tolerance of the reverse-vs-forward mode comparison per op.
const OP_TOL: f64 = 1e-8;

pub fn grad_check(cfg: &Config) -> Result<()> {
    let dir = prepare(cfg)?;
    let seed = cfg.u64("seed")?;
    let spec = ModelSpec {
        d: cfg.usize("gc_dim")?,
        width: cfg.usize("gc_width")?,
        depth: cfg.usize("gc_depth")?,
        m: cfg.usize("gc_m")?,
    };
    let (n, h, tol) = (cfg.usize("gc_samples")?, cfg.f64("gc_h")?, cfg.f64("gc_tol")?);
    let fault = match cfg.choice("fault", &["none", "tanh_derivative"])? {
        "none" => None,
        _ => Some(Fault::TanhDerivative),
    };
    let model = EnergyModel::new(spec, seed)?;

    set_fault(fault);
    let checked = (|| -> Result<_> {
        let losses = CheckedLoss::all()
            .into_iter()
            .map(|l| gradient_check(l, &model, seed, n, h))
            .collect::<ebdl_core::Result<Vec<_>>>()?;
        Ok((losses, dot_product_tests(seed, 3)?))
    })();
    set_fault(None);
    let (losses, ops) = checked?;

    let loss_rows: Vec<Vec<String>> = losses
        .iter()
        .map(|c| {
            let pass = c.max_rel_err < tol;
            println!("{:<18} {:.3e} {}", c.loss, c.max_rel_err, if pass { "PASS" } else { "FAIL" });
            vec![c.loss.clone(), num(c.max_rel_err), c.n_params.to_string(), pass.to_string()]
        })
        .collect();
    write_csv(&dir.join("grad_check.csv"), &["loss", "max_rel_err", "n_params", "pass"], &loss_rows)?;
    let op_rows: Vec<Vec<String>> = ops
        .iter()
        .map(|o| vec![o.op.to_string(), num(o.max_err), (o.max_err < OP_TOL).to_string()])
        .collect();
    write_csv(&dir.join("grad_ops.csv"), &["op", "max_err", "pass"], &op_rows)?;

    let bad_losses: Vec<&str> = losses
        .iter()
        .filter(|c| !(c.max_rel_err < tol))
        .map(|c| c.loss.as_str())
        .collect();
    let bad_ops: Vec<&str> = ops.iter().filter(|o| !(o.max_err < OP_TOL)).map(|o| o.op).collect();
    if bad_losses.is_empty() && bad_ops.is_empty() {
        return Ok(());
    }
    Err(CheckFailed(format!(
        "gradient check failed for losses [{}]; ops with inconsistent derivative rules: [{}]",
        bad_losses.join(", "),
        bad_ops.join(", ")
    ))
    .into())
}
