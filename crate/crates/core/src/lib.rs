//! Low-bit quantization of a toy denoising diffusion model with
//! time-aware activation quantizers and selective distillation finetuning.

pub mod analysis;
pub mod autograd;
mod binfmt;
pub mod calibration;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
mod kernels;
pub mod par;
pub mod params;
pub mod quant;
pub mod real;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
