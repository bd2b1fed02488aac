//! Membership-inference attacks against small denoising diffusion models.

pub mod attacks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod train;

pub use error::{CheckpointError, Error, Result};
