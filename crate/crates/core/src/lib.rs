pub mod baselines;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
