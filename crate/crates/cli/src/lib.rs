//! Command-line driver: experiment configuration and subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod failure;

pub use config::{ExperimentConfig, Scheme};
pub use failure::Failure;
