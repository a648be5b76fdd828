//! Physically consistent neural networks for multi-zone building thermal
//! dynamics, with gray-box and black-box baselines, a synthetic plant, and a
//! Jacobian-based consistency verifier.

pub mod autodiff;
pub mod baselines;
pub mod blackbox;
pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pcnn;
pub mod physics;
pub mod simulator;
pub mod topology;
pub mod training;
pub mod verifier;

pub use error::{Error, Result};
