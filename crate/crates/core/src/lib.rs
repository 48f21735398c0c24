//! Doubly robust, direct estimation of conditional quantile comparators:
//! nuisance estimators, comparator models, DR gradients and losses,
//! optimizers, baselines and a seeded simulation lab.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod model;
pub mod nuisance;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod simlab;
pub mod stats;

pub use error::{Error, Result};
