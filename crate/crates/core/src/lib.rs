//! Online variational inference for state-space models.

pub mod engine;
pub mod error;
pub mod expfam;
pub mod gradients;
pub mod harness;
pub mod models;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod variational;

pub use error::{Error, Result};
