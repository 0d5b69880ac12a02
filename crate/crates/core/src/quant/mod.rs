//! Binary-weight / multi-bit-activation quantizers.
//!
//! Weights are binarized per layer to the two levels `c ± r`, where `c` and
//! `r` are the mean and population standard deviation of the full-precision
//! weights; the split point is the median. Activations go through a uniform
//! `b`-bit quantizer whose backward pass uses a piecewise-quadratic surrogate
//! of the Dirac pulse at every quantization threshold.

mod activation;
mod binarize;
mod ste;

pub use activation::{
    dirac_approx, sign_approx, soft_quantize, soft_quantize_grad, uniform_quantize, ActQuantState,
    SoftQuantParams, MIN_RANGE_SPAN,
};
pub use binarize::{binarize_forward, binarize_levels, BinaryLevels};
pub use ste::{ste_grad_factor, SteParams, SteSchedule};
