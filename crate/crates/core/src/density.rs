//! Common interfaces over learned and exact densities.

use ndarray::{Array2, ArrayView2, Axis};

use crate::ebm::{EnergyModel, TIME_STEP};
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, MarginalFamily};
use crate::math::logsumexp;

/// A time-indexed, possibly unnormalized family of log-densities.
pub trait TimeDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>>;
    fn score(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>>;
    /// `d/dt log p_t(x)`.
    fn time_derivative(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>>;
}

/// A fixed unnormalized target.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: ArrayView2<f64>) -> Result<Vec<f64>>;
    fn score(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl TimeDensity for EnergyModel {
    fn dim(&self) -> usize {
        EnergyModel::dim(self)
    }

    fn log_density(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        EnergyModel::log_density(self, &vec![t; x.nrows()], x)
    }

    fn score(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        EnergyModel::score(self, &vec![t; x.nrows()], x)
    }

    fn time_derivative(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        EnergyModel::time_derivative(self, &vec![t; x.nrows()], x, TIME_STEP)
    }
}

impl TimeDensity for MarginalFamily {
    fn dim(&self) -> usize {
        MarginalFamily::dim(self)
    }

    fn log_density(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.at(t)?.log_density_batch(x)
    }

    fn score(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.at(t)?.score_batch(x)
    }

    fn time_derivative(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        x.rows().into_iter().map(|r| self.time_score(t, r)).collect()
    }
}

impl Target for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn log_density(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.log_density_batch(x)
    }

    fn score(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.score_batch(x)
    }
}

/// A time density frozen at one time.
pub struct AtTime<'a, D: TimeDensity + ?Sized> {
    pub density: &'a D,
    pub t: f64,
}

impl<D: TimeDensity + ?Sized> Target for AtTime<'_, D> {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn log_density(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.density.log_density(self.t, x)
    }

    fn score(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.density.score(self.t, x)
    }
}

/// `(1 - beta) log p_a + beta log p_b`.
pub struct Geometric<'a> {
    pub a: &'a dyn Target,
    pub b: &'a dyn Target,
    pub beta: f64,
}

impl Target for Geometric<'_> {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn log_density(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let (la, lb) = (self.a.log_density(x)?, self.b.log_density(x)?);
        Ok(la
            .iter()
            .zip(&lb)
            .map(|(a, b)| (1.0 - self.beta) * a + self.beta * b)
            .collect())
    }

    fn score(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.a.score(x)? * (1.0 - self.beta) + self.b.score(x)? * self.beta)
    }
}

/// Adds a time-only function to a density: `log p_t(x) + c(t)`.
pub struct TimeOffset<'a, D: TimeDensity + ?Sized, F: Fn(f64) -> f64 + Sync> {
    pub inner: &'a D,
    pub offset: F,
    /// Step for the derivative of `offset`.
    pub h: f64,
}

impl<D: TimeDensity + ?Sized, F: Fn(f64) -> f64 + Sync> TimeDensity for TimeOffset<'_, D, F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let c = (self.offset)(t);
        Ok(self.inner.log_density(t, x)?.into_iter().map(|v| v + c).collect())
    }

    fn score(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inner.score(t, x)
    }

    fn time_derivative(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let dc = ((self.offset)(t + self.h) - (self.offset)(t - self.h)) / (2.0 * self.h);
        Ok(self.inner.time_derivative(t, x)?.into_iter().map(|v| v + dc).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompositionOp {
    /// Product of densities.
    And,
    /// Equal-weight mixture of the normalized densities.
    Or,
}

/// Composition of two densities. For `Or`, `log_z` holds the log-normalizer
/// estimates used to put the two densities on a common scale.
pub struct Composed<'a> {
    pub a: &'a dyn TimeDensity,
    pub b: &'a dyn TimeDensity,
    pub op: CompositionOp,
    pub log_z: [f64; 2],
}

impl Composed<'_> {
    fn or_parts(&self, t: f64, x: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let la = self.a.log_density(t, x)?;
        let lb = self.b.log_density(t, x)?;
        Ok((
            la.into_iter().map(|v| v - self.log_z[0]).collect(),
            lb.into_iter().map(|v| v - self.log_z[1]).collect(),
        ))
    }
}

impl TimeDensity for Composed<'_> {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn log_density(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        match self.op {
            CompositionOp::And => {
                let la = self.a.log_density(t, x)?;
                let lb = self.b.log_density(t, x)?;
                Ok(la.iter().zip(&lb).map(|(a, b)| a + b).collect())
            }
            CompositionOp::Or => {
                let (la, lb) = self.or_parts(t, x)?;
                Ok(la
                    .iter()
                    .zip(&lb)
                    .map(|(a, b)| logsumexp(&[*a, *b]) - std::f64::consts::LN_2)
                    .collect())
            }
        }
    }

    fn score(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (sa, sb) = (self.a.score(t, x)?, self.b.score(t, x)?);
        match self.op {
            CompositionOp::And => Ok(sa + sb),
            CompositionOp::Or => {
                let (la, lb) = self.or_parts(t, x)?;
                let mut out = sa;
                for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                    let wa = 1.0 / (1.0 + (lb[i] - la[i]).exp());
                    row.zip_mut_with(&sb.row(i), |a, b| *a = wa * *a + (1.0 - wa) * b);
                }
                Ok(out)
            }
        }
    }

    fn time_derivative(&self, t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let (da, db) = (self.a.time_derivative(t, x)?, self.b.time_derivative(t, x)?);
        match self.op {
            CompositionOp::And => Ok(da.iter().zip(&db).map(|(a, b)| a + b).collect()),
            CompositionOp::Or => {
                let (la, lb) = self.or_parts(t, x)?;
                Ok((0..la.len())
                    .map(|i| {
                        let wa = 1.0 / (1.0 + (lb[i] - la[i]).exp());
                        wa * da[i] + (1.0 - wa) * db[i]
                    })
                    .collect())
            }
        }
    }
}

/// A density that is constant in `x` (a flat energy).
pub struct Flat {
    pub d: usize,
}

impl TimeDensity for Flat {
    fn dim(&self) -> usize {
        self.d
    }

    fn log_density(&self, _t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.d {
            return Err(Error::dims(self.d, x.ncols()));
        }
        Ok(vec![0.0; x.nrows()])
    }

    fn score(&self, _t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.raw_dim()))
    }

    fn time_derivative(&self, _t: f64, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.nrows()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::NoisingSchedule;
    use ndarray::arr2;

    #[test]
    fn or_of_mixtures_is_flat_mixture() {
        let (a, b) = GaussianMixture::composition_pair(0.5, 0.01);
        let fa = MarginalFamily::Static(a.clone());
        let fb = MarginalFamily::Static(b.clone());
        let c = Composed {
            a: &fa,
            b: &fb,
            op: CompositionOp::Or,
            log_z: [0.0, 0.0],
        };
        let flat = a.or_composition(&b).unwrap();
        let x = arr2(&[[0.1, 0.4], [-0.3, -0.6], [0.0, 0.0]]);
        let lc = c.log_density(0.5, x.view()).unwrap();
        let lf = flat.log_density_batch(x.view()).unwrap();
        let sc = c.score(0.5, x.view()).unwrap();
        let sf = flat.score_batch(x.view()).unwrap();
        for i in 0..3 {
            assert!((lc[i] - lf[i]).abs() < 1e-12);
            for j in 0..2 {
                assert!((sc[[i, j]] - sf[[i, j]]).abs() < 1e-9 * sf[[i, j]].abs().max(1.0));
            }
        }
    }

    #[test]
    fn offset_shifts_time_derivative() {
        let fam = MarginalFamily::Dm {
            sched: NoisingSchedule::vp_default(),
            base: GaussianMixture::standard_normal(1),
        };
        let off = TimeOffset {
            inner: &fam,
            offset: |t: f64| 3.0 * t,
            h: 1e-4,
        };
        let x = arr2(&[[0.3]]);
        let a = off.time_derivative(0.4, x.view()).unwrap()[0];
        let b = fam.time_derivative(0.4, x.view()).unwrap()[0];
        assert!((a - b - 3.0).abs() < 1e-9);
    }
}
