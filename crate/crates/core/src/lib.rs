pub mod baselines;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod fusion;
pub mod lacd;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{FcosError, Result};
