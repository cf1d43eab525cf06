//! Differentiable predictive control for networked macroscopic fundamental
//! diagram (NMFD) traffic models.
pub mod autodiff;
pub mod baselines;
mod error;
pub mod evaluation;
pub mod model;
pub mod plant;
pub mod policy;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
