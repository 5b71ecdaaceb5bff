//! CSV writers and the per-run output directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::ArrayView2;

use crate::config::Config;

/// Creates the output directory and writes the resolved config into it.
pub fn prepare(cfg: &Config) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.str("out_dir"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("resolved.cfg"), cfg.render())?;
    Ok(dir)
}

/// Shortest text that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `particle,dim0..,log_weight`.
pub fn write_samples(path: &Path, x: ArrayView2<f64>, log_weights: &[f64]) -> Result<()> {
    let mut header = vec!["particle".to_string()];
    header.extend((0..x.ncols()).map(|j| format!("dim{j}")));
    header.push("log_weight".into());
    let rows: Vec<Vec<String>> = x
        .rows()
        .into_iter()
        .zip(log_weights)
        .enumerate()
        .map(|(i, (r, w))| {
            let mut row = vec![i.to_string()];
            row.extend(r.iter().map(|v| num(*v)));
            row.push(num(*w));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, &rows)
}

/// `metric,value` pairs.
pub fn write_summary(path: &Path, pairs: &[(&str, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = pairs.iter().map(|(k, v)| vec![k.to_string(), num(*v)]).collect();
    write_csv(path, &["metric", "value"], &rows)
}
