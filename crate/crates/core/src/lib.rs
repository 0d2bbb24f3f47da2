//! Sparse linear recovery: stepwise regression, sparse Bayesian learning by
//! coordinate ascent, computable recovery guarantees, and the experiment
//! harness that exercises them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::excessive_precision))]

pub mod error;
pub mod experiments;
pub mod guarantees;
pub mod linalg;
pub mod sbl;
pub mod stepwise;

pub use error::{Error, Result};
pub use linalg::{ActiveModel, Dictionary};

#[cfg(test)]
mod testutil;
