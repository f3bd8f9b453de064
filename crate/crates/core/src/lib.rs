//! Compressed private aggregation for federated learning.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod codec;
pub mod data;
pub mod error;
pub mod flsim;
pub mod lattice;
pub mod plan;
pub mod stream;
pub mod suites;

pub use error::{Error, Result};
