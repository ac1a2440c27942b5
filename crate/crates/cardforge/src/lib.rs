//! Learned cardinality estimation toolkit: per-table tree Bayesian networks
//! for COUNT, bucket-based join-size bounds, a frequency-profile NDV network,
//! the engine/forge/monitor plumbing around them, and the two optimizer
//! applications (materialization column ordering, hash-table sizing).

pub mod baselines;
pub mod bn;
pub mod error;
mod exec;
pub mod join;
pub mod ndv;
pub mod query;
pub mod schema;
pub mod synth;
pub mod util;

pub use error::{CardError, Result};
