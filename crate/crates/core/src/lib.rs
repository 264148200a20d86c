//! Preference-conditioned in-context posterior models for multi-objective
//! black-box optimization.

pub mod acquisition;
pub mod baselines;
pub mod benchmarks;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod scalarize;
pub mod trainer;

pub use error::{Error, Result};
