//! Command-line workflows for the beamforming lab: simulate, beamform, train,
//! infer, eval and bench, all writing into one run directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
