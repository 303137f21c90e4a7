//! Experiment runner behind the `dgp` binary: dataset resolution, repeated
//! train/evaluate protocol, timing grids and gradient checks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod benchmark;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod format;
pub mod gradcheck;
pub mod run;

pub use error::{CliError, CliResult, FailureKind};
