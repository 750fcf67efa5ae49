//! Reinforcement learning from pairwise trajectory preferences.
//!
//! An actor-critic agent optimises a reward predictor that is fit, at the same
//! time, to comparisons between short clips of its own behaviour. Comparisons
//! come from a synthetic oracle or from people through the labeling service.

// Validation writes `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod feedback;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod orchestrator;
pub mod policy;
pub mod query;
pub mod reward;
pub mod segment;

pub use error::{Error, Result};
