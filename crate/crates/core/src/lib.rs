//! Nested sequential Monte Carlo for amortized Bayesian experimental design
//! in stochastic dynamical systems.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod csmc;
pub mod error;
pub mod eval;
pub mod models;
pub mod policy;
pub mod posterior;
pub mod smc;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
