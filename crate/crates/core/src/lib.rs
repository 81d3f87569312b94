//! Pretext-task adversarial learning for unpaired low-field → high-field MRI
//! synthesis, at desk scale.

pub mod autodiff;
pub mod corruption;
pub mod data;
mod io_util;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod training;
