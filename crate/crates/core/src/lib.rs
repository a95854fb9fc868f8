//! Critical mortality intensity and nonnegative equilibrium branches for
//! age-structured population models with nonlinear diffusion on an interval.
//!
//! The pipeline: parse a model from text coefficients, discretize space and
//! age, locate the critical intensity where the net-reproduction operator
//! has spectral radius one, follow the branch of nontrivial equilibria that
//! emanates there, and verify the structural claims (positivity, kernel
//! dimension, transversality, subcriticality) numerically.

pub mod ageprop;
pub mod analysis;
pub mod config;
pub mod driver;
pub mod equilibrium;
pub mod error;
pub mod expr;
pub mod linalg;
pub mod model;
pub mod report;
pub mod roots;
pub mod spatial;

pub use error::{Error, Result};
