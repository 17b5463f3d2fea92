//! Continual learning across sequential data centers with a frozen
//! feature-reconstruction head.

// Validations use `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod continual;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
