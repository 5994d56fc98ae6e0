//! Desk-scale laboratory for flow-map (MeanFlow) training in a lifted latent
//! space, with exact oracles for finite-support data.

pub mod analysis;
pub mod dataset;
pub mod dual;
pub mod error;
pub mod network;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod rae;
pub mod rng;
pub mod schedule;
pub mod solver;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
