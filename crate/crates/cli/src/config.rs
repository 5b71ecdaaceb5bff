//! Flat `key = value` experiment configs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

/// A user-facing configuration problem (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Every accepted key with its default, in the order they are written out.
const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("workers", "1", "threads for sharded loss evaluation"),
    ("out_dir", "out", "output directory"),
    // data
    ("mixture", "mog2", "mog2 | mog40 | normal | composition_a | composition_b | file:PATH"),
    ("mixture_b", "normal", "second mixture (interpolant endpoint, second composed model)"),
    ("dim", "2", "dimension of the named mixtures"),
    ("mixture_seed", "0", "seed for randomly placed modes"),
    ("composition_sep", "2.0", "mode offset of the composition pair"),
    ("composition_var", "0.1", "mode variance of the composition pair"),
    ("standardize", "false", "standardize both mixtures by the moments of `mixture`"),
    // process
    ("process", "vp", "vp | ve | si"),
    ("beta_min", "0.1", ""),
    ("beta_max", "20.0", ""),
    ("sigma_min", "0.01", ""),
    ("sigma_max", "10.0", ""),
    ("si_amp", "1.0", "interpolant noise amplitude"),
    // model
    ("width", "64", ""),
    ("depth", "4", ""),
    ("emb_m", "16", "time-embedding frequencies"),
    // training
    ("losses", "dsm+clf", "any of dsm, clf, ctsm joined by +"),
    ("n_classes", "4", "noise levels per classification group"),
    ("batch_size", "256", ""),
    ("steps", "1000", ""),
    ("warmup_steps", "0", "denoising-only steps first"),
    ("lr", "1e-3", ""),
    ("lr_schedule", "constant", "constant | cosine (decays to zero over steps)"),
    ("beta1", "0.9", ""),
    ("beta2", "0.999", ""),
    ("adam_eps", "1e-8", ""),
    ("log_every", "100", ""),
    ("antithetic", "auto", "auto | true | false"),
    ("dsm_times", "uniform", "uniform | lognormal"),
    ("dsm_sigma_mean", "-1.2", "mean of log sigma for lognormal times"),
    ("dsm_sigma_std", "1.2", "std of log sigma for lognormal times"),
    ("log_wall_time", "false", ""),
    ("train_eval", "true", "evaluate the final model into metrics.csv"),
    // evaluation
    ("eval_points", "16", "time grid length"),
    ("eval_t_min", "1e-4", ""),
    ("eval_t_max", "0.9999", ""),
    ("eval_spacing", "linear", "linear | log"),
    ("eval_samples", "1000", "exact samples per grid time"),
    ("eval_global", "true", "also generate samples and compare them with the data"),
    // sampling
    ("sampler_steps", "500", "integration steps"),
    ("sampler_t_min", "1e-4", "last time of the reverse integration"),
    ("sampler_g", "1.0", "interpolant sampler diffusion"),
    ("n_particles", "2000", ""),
    ("n_proj", "128", "projections of the sliced metrics"),
    // SMC
    ("levels", "64", "SMC levels K"),
    ("mala_steps", "64", "MALA steps per level L"),
    ("mala_step", "0.05", "initial MALA step size"),
    ("mala_adapt", "true", "adapt the MALA step towards 75% acceptance"),
    ("alpha", "0.3", "resample when ESS < alpha N"),
    ("smc_g", "0.3", "diffusion of the SMC proposal kernels"),
    ("smc_t_min", "1e-3", ""),
    ("smc_t_max", "0.999", ""),
    ("kernel_score", "oracle", "oracle | model"),
    ("pin_target", "true", "use the exact density at the last level"),
    ("log_z_a", "0.0", "log normalizer of the first composed density, or auto"),
    ("log_z_b", "0.0", "log normalizer of the second composed density, or auto"),
    // blindness sweep
    ("blind_ref_weight", "0.5", "left-mode weight of the reference mixture"),
    ("blind_points", "13", "weights on [0.2, 0.8]"),
    ("blind_sep", "5.0", "modes at +-sep"),
    ("blind_var", "0.05", ""),
    ("blind_t", "0.01", "time of the score and time-score comparison"),
    ("blind_times", "8", "noise levels of the classification gap"),
    ("blind_samples", "4000", ""),
    // free energy
    ("fe_source", "analytic", "analytic | checkpoint"),
    ("potential_a", "gauss:0,0:1", "gauss:<mean,..>:<var>"),
    ("potential_b", "gauss:1,-1:2", "gauss:<mean,..>:<var>"),
    ("fe_estimators", "fep,bar,ti,mbar", ""),
    ("fe_samples", "2000", "samples per state"),
    ("fe_grid", "33", "integration grid points"),
    ("fe_states", "8", "MBAR states"),
    ("fe_h", "1e-3", "time-derivative step"),
    // gradient check
    ("gc_dim", "2", ""),
    ("gc_width", "8", ""),
    ("gc_depth", "3", ""),
    ("gc_m", "2", ""),
    ("gc_samples", "6", ""),
    ("gc_h", "1e-4", ""),
    ("gc_tol", "1e-4", ""),
    ("fault", "none", "none | tanh_derivative (test hook)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(config_err(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(config_err(format!("unknown key `{key}`"))),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from the key table"))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, what: &str) -> anyhow::Result<T> {
        let v = self.str(key);
        v.parse()
            .map_err(|_| config_err(format!("`{key}` must be {what}, got `{v}`")))
    }

    pub fn f64(&self, key: &str) -> anyhow::Result<f64> {
        let v: f64 = self.typed(key, "a number")?;
        if !v.is_finite() {
            return Err(config_err(format!("`{key}` must be finite")));
        }
        Ok(v)
    }

    pub fn usize(&self, key: &str) -> anyhow::Result<usize> {
        self.typed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> anyhow::Result<u64> {
        self.typed(key, "a non-negative integer")
    }

    pub fn bool(&self, key: &str) -> anyhow::Result<bool> {
        self.typed(key, "true or false")
    }

    /// One of `options`.
    pub fn choice<'a>(&'a self, key: &str, options: &[&str]) -> anyhow::Result<&'a str> {
        let v = self.str(key);
        if options.contains(&v) {
            Ok(v)
        } else {
            Err(config_err(format!("`{key}` must be one of {}, got `{v}`", options.join(" | "))))
        }
    }

    /// The resolved config as text, one key per line with its description.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, _, help) in KEYS {
            let line = format!("{k} = {}", self.values[*k]);
            if help.is_empty() {
                s.push_str(&line);
            } else {
                s.push_str(&format!("{line:<32} # {help}"));
            }
            s.push('\n');
        }
        s
    }
}
