//! Binary-weight multi-bit-activation (BWMA) quantization-aware training and
//! compute-in-memory crossbar simulation.

pub mod autodiff;
pub mod cim;
pub mod data;
pub mod error;
pub mod hw_cost;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod quant;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
