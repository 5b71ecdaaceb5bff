//! Shared fixtures for the benchmarks.

use ebdl_core::losses::{sample_noisy, ClfBatch, JointBatch, Process};
use ebdl_core::math::{linspace, stream_rng};
use ebdl_core::{EnergyModel, GaussianMixture, MarginalFamily, ModelSpec, NoisingSchedule};

pub fn vp() -> Process {
    Process::Dm(NoisingSchedule::vp(0.1, 20.0))
}

pub fn family() -> MarginalFamily {
    vp().family(&GaussianMixture::mog2(2), &GaussianMixture::standard_normal(2))
}

/// A freshly initialized model of the default training size.
pub fn model(width: usize, depth: usize) -> EnergyModel {
    EnergyModel::new(ModelSpec { d: 2, width, depth, m: 16 }, 0).unwrap()
}

/// One joint batch: `b` denoising pairs and 4 noise levels of `b / 4`.
pub fn joint_batch(b: usize) -> JointBatch {
    let mut rng = stream_rng(0, 1);
    let x0 = GaussianMixture::mog2(2).sample(b, &mut rng);
    let dsm = sample_noisy(&vp(), x0.view(), None, &mut rng).unwrap();
    let clf = ClfBatch::from_family(&family(), linspace(0.05, 0.95, 4), b / 4, &mut rng).unwrap();
    JointBatch { dsm: Some(dsm), clf: Some(clf), ctsm: None }
}
