mod blindness;
mod fe;
mod grad_check;
mod smc;
mod train;

pub use blindness::blindness;
pub use fe::free_energy;
pub use grad_check::grad_check;
pub use smc::{compose, smc_bg};
pub use train::{eval, sample, train};

/// A check that ran to completion and failed (exit code 3).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}
