//! Pipeline-aware hyperparameter tuning.
//!
//! Candidate pipeline configurations are merged into a prefix-sharing DAG
//! ([`dag`]), drawn from structured search spaces so that prefixes actually
//! coincide ([`space`]), rebalanced with Successive Halving
//! ([`early_stopping`]), and finally executed against a bounded cache, either
//! under an online eviction policy ([`cache`]) or under the exact offline
//! optimum ([`opt`]). [`workloads`] provides the synthetic and profile-driven
//! DAGs the experiments run on.

pub mod cache;
pub mod dag;
pub mod early_stopping;
mod error;
pub mod opt;
pub mod seed;
pub mod space;
pub mod workloads;

pub use error::{Error, Result};
