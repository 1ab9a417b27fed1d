//! Operational neural network engine with generative and super neurons.

pub mod backprop;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod pgm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
