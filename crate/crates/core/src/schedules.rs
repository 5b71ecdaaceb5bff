//! Closed-form noising schedules.
//!
//! Diffusion processes are written as `Y_t = S(t) X_0 + S(t) sigma(t) Z`, so
//! the noise scale is `gamma = S * sigma`. Stochastic interpolants only carry
//! `gamma(t) = sqrt(a t (1 - t))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Vp { beta_min: f64, beta_max: f64 },
    Ve { sigma_min: f64, sigma_max: f64 },
    SiLinear { amp: f64 },
}

/// A schedule on `[0, T]` with `T = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisingSchedule {
    pub kind: ScheduleKind,
}

/// Everything a diffusion schedule provides at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleEval {
    pub s: f64,
    pub s_dot: f64,
    pub sigma: f64,
    pub sigma_dot: f64,
    pub gamma: f64,
    pub gamma_dot: f64,
    /// Drift coefficient of the forward SDE, `f = S'/S`.
    pub f: f64,
    /// Diffusion coefficient of the forward SDE.
    pub g: f64,
}

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Variance-preserving schedule with linear `beta(t)`.
pub fn vp_eval(t: f64, beta_min: f64, beta_max: f64) -> Result<ScheduleEval> {
    check_time(t)?;
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
        return Err(Error::domain(format!(
            "VP rates need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
        )));
    }
    let a = 0.5 * (beta_max - beta_min) * t * t + beta_min * t;
    let beta = beta_min + t * (beta_max - beta_min);
    let s = (-0.5 * a).exp();
    let sigma2 = a.exp_m1();
    let sigma = sigma2.sqrt();
    // gamma^2 = S^2 sigma^2 = 1 - exp(-A)
    let gamma = (-(-a).exp_m1()).sqrt();
    let (sigma_dot, gamma_dot) = if t == 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (
            beta * a.exp() / (2.0 * sigma),
            beta * (-a).exp() / (2.0 * gamma),
        )
    };
    Ok(ScheduleEval {
        s,
        s_dot: -0.5 * beta * s,
        sigma,
        sigma_dot,
        gamma,
        gamma_dot,
        f: -0.5 * beta,
        g: beta.sqrt(),
    })
}

/// Variance-exploding schedule, `sigma(t)^2 = sigma_min^2 (r^(2t) - 1)` with
/// `r = sigma_max / sigma_min`.
pub fn ve_eval(t: f64, sigma_min: f64, sigma_max: f64) -> Result<ScheduleEval> {
    check_time(t)?;
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::domain(format!(
            "VE scales need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
        )));
    }
    let ln_r = (sigma_max / sigma_min).ln();
    let r2t = (2.0 * t * ln_r).exp();
    let sigma = sigma_min * (2.0 * t * ln_r).exp_m1().sqrt();
    let sigma_dot = if t == 0.0 {
        f64::INFINITY
    } else {
        sigma_min * sigma_min * r2t * ln_r / sigma
    };
    Ok(ScheduleEval {
        s: 1.0,
        s_dot: 0.0,
        sigma,
        sigma_dot,
        gamma: sigma,
        gamma_dot: sigma_dot,
        f: 0.0,
        g: sigma_min * (2.0 * ln_r).sqrt() * (t * ln_r).exp(),
    })
}

/// Interpolant noise `sqrt(amp t (1 - t))` and its derivative. The derivative
/// is singular at both endpoints, which is reported as a domain error.
pub fn si_gamma(t: f64, amp: f64) -> Result<(f64, f64)> {
    let gamma = si_gamma_value(t, amp)?;
    if t == 0.0 || t == 1.0 {
        return Err(Error::domain(format!(
            "interpolant gamma derivative is singular at t = {t}"
        )));
    }
    Ok((gamma, amp * (1.0 - 2.0 * t) / (2.0 * gamma)))
}

pub fn si_gamma_value(t: f64, amp: f64) -> Result<f64> {
    check_time(t)?;
    if !(amp > 0.0 && amp.is_finite()) {
        return Err(Error::domain(format!("interpolant amplitude must be > 0, got {amp}")));
    }
    Ok((amp * t * (1.0 - t)).sqrt())
}

impl NoisingSchedule {
    pub fn vp(beta_min: f64, beta_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Vp { beta_min, beta_max },
        }
    }

    pub fn vp_default() -> Self {
        Self::vp(DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    }

    pub fn ve(sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            },
        }
    }

    pub fn si_linear(amp: f64) -> Self {
        Self {
            kind: ScheduleKind::SiLinear { amp },
        }
    }

    pub fn is_diffusion(&self) -> bool {
        !matches!(self.kind, ScheduleKind::SiLinear { .. })
    }

    /// Full evaluation for diffusion schedules.
    pub fn eval(&self, t: f64) -> Result<ScheduleEval> {
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => vp_eval(t, beta_min, beta_max),
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => ve_eval(t, sigma_min, sigma_max),
            ScheduleKind::SiLinear { .. } => Err(Error::domain(
                "interpolant schedules have no S(t)/sigma(t); use gamma()",
            )),
        }
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::SiLinear { amp } => si_gamma_value(t, amp),
            _ => Ok(self.eval(t)?.gamma),
        }
    }

    /// Inverse of `sigma(t)` for diffusion schedules.
    pub fn time_of_sigma(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                // Solve 0.5 (b1 - b0) t^2 + b0 t = log(1 + sigma^2).
                let a = sigma.powi(2).ln_1p();
                let k = beta_max - beta_min;
                if k == 0.0 {
                    Ok(a / beta_min)
                } else {
                    Ok(2.0 * a / (beta_min + (beta_min * beta_min + 2.0 * k * a).sqrt()))
                }
            }
            ScheduleKind::Ve { sigma_min, sigma_max } => {
                Ok((sigma / sigma_min).powi(2).ln_1p() / (2.0 * (sigma_max / sigma_min).ln()))
            }
            ScheduleKind::SiLinear { .. } => Err(Error::domain("interpolant schedules have no sigma(t)")),
        }
    }

    /// `(gamma, gamma_dot)` for any kind.
    pub fn gamma_pair(&self, t: f64) -> Result<(f64, f64)> {
        match self.kind {
            ScheduleKind::SiLinear { amp } => si_gamma(t, amp),
            _ => {
                let e = self.eval(t)?;
                Ok((e.gamma, e.gamma_dot))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn vp_at_zero() {
        let e = vp_eval(0.0, 0.1, 20.0).unwrap();
        assert_eq!((e.s, e.sigma, e.gamma), (1.0, 0.0, 0.0));
    }

    #[test]
    fn vp_constant_rate_closed_form() {
        let beta = 1.7;
        for &t in &[0.05, 0.3, 0.77, 1.0] {
            let e = vp_eval(t, beta, beta).unwrap();
            assert!(rel(e.s, (-beta * t / 2.0).exp()) < 1e-14);
            assert!(rel(e.sigma * e.sigma, (beta * t).exp() - 1.0) < 1e-13);
        }
    }

    #[test]
    fn ve_endpoint() {
        let e = ve_eval(1.0, 0.01, 50.0).unwrap();
        assert!(rel(e.sigma, (2500.0f64 - 1e-4).sqrt()) < 1e-13);
        assert_eq!(ve_eval(0.0, 0.01, 50.0).unwrap().sigma, 0.0);
    }

    #[test]
    fn si_gamma_midpoint_and_endpoints() {
        let (g, gd) = si_gamma(0.5, 1.0).unwrap();
        assert_eq!((g, gd), (0.5, 0.0));
        assert_eq!(si_gamma_value(0.0, 1.0).unwrap(), 0.0);
        assert!(si_gamma(0.0, 1.0).is_err());
        assert!(si_gamma(1.0, 1.0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(vp_eval(1.5, 0.1, 20.0).is_err());
        assert!(vp_eval(0.5, 0.0, 20.0).is_err());
        assert!(vp_eval(0.5, 2.0, 1.0).is_err());
        assert!(ve_eval(0.5, 2.0, 1.0).is_err());
        assert!(ve_eval(f64::NAN, 0.1, 1.0).is_err());
        assert!(NoisingSchedule::si_linear(1.0).eval(0.5).is_err());
    }
}
