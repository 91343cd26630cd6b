//! Simulation lab for compute-in-memory neural networks: Monte-Carlo
//! Bayesian inference, memristive crossbar execution under faults,
//! functional self-test generation and post-fault mitigation.

pub mod bayesian;
pub mod crossbar;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mitigation;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod testing;
pub mod uncertainty;

pub use error::{LabError, Result};
pub use tensor::Tensor;
