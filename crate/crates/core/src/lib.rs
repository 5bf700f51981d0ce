//! Bayesian hierarchical model for volleyball league results.
//!
//! Points scored by each side follow independent Poissons with log-linear
//! attack/defence structure; two logistic regressions model whether a match
//! goes to five sets and whether the home side wins. The posterior is
//! explored with an adaptive Metropolis-within-Gibbs sampler and used to
//! replicate seasons, league tables and ranking probabilities.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod mcmc;
pub mod model;
pub mod predictive;
pub mod priors;
pub mod synthetic;
pub mod trace;

pub use error::{Error, Result};
