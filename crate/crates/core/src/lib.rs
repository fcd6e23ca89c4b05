//! Diffusion-model inverse problem solving on small images.
//!
//! The crate provides a scalar-reverse-mode autodiff tape over dense f32
//! tensors, a small convolutional UNet used both as an epsilon denoiser and
//! as a data-consistency residual network, DDPM-style noise schedules with
//! timestep respacing, differentiable degradation operators with exact
//! pseudo-inverses, the training loops for both networks, and the image
//! quality / distribution diagnostics used to evaluate them.

pub mod autodiff;
pub mod consistency;
pub mod ddc_train;
pub mod denoiser;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod operators;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
