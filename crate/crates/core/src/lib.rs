//! Path-dependent forward-backward SDE solver with certified horizons.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characteristic;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod dominating;
pub mod error;
pub mod field;
pub mod global;
pub mod local;
pub mod paths;
pub mod problems;

pub use error::{Error, Result};
