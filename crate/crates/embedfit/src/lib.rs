//! File formats, run configuration and the `embedfit` command line.

pub mod cli;
pub mod config;
pub mod formats;

pub use embedfit_core as core;
