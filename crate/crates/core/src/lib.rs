//! Second-order asymptotics of supercritical spiked sample covariance matrices.

pub mod ensemble;
pub mod error;
pub mod identities;
pub mod inference;
pub mod model;
pub mod montecarlo;
pub mod predictor;
pub mod resolvent;
pub mod scalar_theory;

pub use error::{Error, Result};
