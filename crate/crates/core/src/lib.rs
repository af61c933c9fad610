//! Time series classification with trainable encoders, optionally stacked
//! on a frozen decoder-only transformer.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
