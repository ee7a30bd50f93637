//! Config-driven experiment runner.

pub mod config;
pub mod pipeline;
pub mod run;

pub use run::{run, validate_file, Command, RunOptions};
