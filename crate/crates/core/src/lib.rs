//! Time-dependent energy-based models for diffusion models and stochastic
//! interpolants.
//!
//! The crate trains an energy `U(t, x)` with a learnable free-energy head
//! `F(t)` so that `exp(-U + F)` tracks the marginals of a noising process.
//! Training combines denoising score matching with a softmax classifier over
//! noise levels. Around the model sit the tools needed to check and use it:
//! closed-form Gaussian-mixture oracles, a small reverse-mode engine with
//! second-order support, SMC/MALA samplers, free-energy estimators and the
//! usual evaluation metrics.

pub mod density;
pub mod ebm;
pub mod error;
pub mod free_energy;
pub mod gmm;
pub mod grad;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod samplers;
pub mod schedules;
pub mod trainer;

pub use density::{Target, TimeDensity};
pub use ebm::{EnergyModel, ModelSpec, TimeEmbedding};
pub use error::{Error, Result};
pub use gmm::{GaussianMixture, MarginalFamily};
pub use grad::{Graph, NodeId, Tensor};

pub use schedules::{NoisingSchedule, ScheduleEval};

