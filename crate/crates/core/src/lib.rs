//! Deterministic simulator for fairness-aware federated learning with
//! differential privacy: local DP-SGD with a tunable disparity regularizer,
//! private statistics sharing, weighted aggregation, and Renyi-DP accounting.

// Validation guards are written as negated comparisons (`!(x > 0.0)`)
// on purpose: the negation also rejects NaN, which `x <= 0.0` lets through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod data;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
