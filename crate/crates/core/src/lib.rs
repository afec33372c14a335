//! Bayesian principal stratification for binary outcomes under one-sided
//! or two-sided noncompliance, with probit BART response surfaces.

pub mod bart;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimands;
pub mod interpret;
pub mod linear;
pub mod numeric;
pub mod robustness;
pub mod sim;
pub mod strata;

pub use error::{Error, Result};
pub use numeric::Real;

pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Forest64 = bart::Forest<f64>;
pub type Forest32 = bart::Forest<f32>;
