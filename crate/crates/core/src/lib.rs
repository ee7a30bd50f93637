//! Certified escape from posterior collapse with teacher-aligned regular-simplex witnesses.

pub mod analytic;
pub mod certificate;
pub mod cli;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod matrix_io;
pub mod numeric;
pub mod rng;
pub mod teacher;

pub use error::{Error, Result};
