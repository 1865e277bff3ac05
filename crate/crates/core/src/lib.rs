//! Multi-model inversion and membership-inference attacks against
//! biometric-style networks, with the experiment harness that runs them.

mod conv;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod evaluation;
pub mod incorporation;
pub mod inversion;
pub mod membership;
pub mod nn;
pub mod target_models;

pub use error::{Error, Result};
