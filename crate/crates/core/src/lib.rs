//! Variational inference for Gaussian hidden Markov models: batch structured
//! mean-field updates and stochastic variational inference over subchains.

// Negated comparisons in this crate are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod harness;
mod linalg;
pub mod message;
pub mod model;
pub mod stats;
pub mod svi;
pub mod synthetic;
pub mod trace;

pub use error::{Error, Result};
pub use linalg::{ln_mv_gamma, mv_digamma};
