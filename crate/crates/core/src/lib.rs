//! Multimodal caption generation for scientific figures.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
