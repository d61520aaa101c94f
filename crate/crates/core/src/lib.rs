//! Core of a federated learning aggregation simulator.
#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod allocation;
pub mod analysis;
pub mod channel;
pub mod combining;
pub mod data;
pub mod encoding;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod rng;
#[cfg(test)]
mod testutil;

pub use error::{FlError, Result};
