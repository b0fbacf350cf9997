//! Causal mediation analysis for sparse, irregularly observed longitudinal
//! mediators and outcomes, using Bayesian functional principal components.
//!
//! The pipeline: [`data`] loads long-format observations, [`fpca`] fits the
//! mediator and outcome models by Gibbs sampling, and [`mediation`] turns the
//! posterior draws into total, mediated and direct effect curves. [`simulate`]
//! generates synthetic studies with known effects, [`gee`] provides a
//! product-of-coefficients baseline and [`study`] runs replicated
//! simulation comparisons.

pub mod cli;
pub mod config;
pub mod data;
pub mod dist;
pub mod error;
pub mod fpca;
pub mod gee;
pub mod linalg;
pub mod mediation;
pub mod rng;
pub mod simulate;
pub mod splines;
pub mod study;

pub use error::{Error, Result};
