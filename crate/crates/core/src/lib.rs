//! Underwater non-uniform illumination restoration toolkit.
//!
//! Paired dataset synthesis from raw images and segmentation masks, a small
//! convolutional restoration network with windowed self-attention trained on a
//! from-scratch reverse-mode differentiation core, and full- and no-reference
//! image quality metrics.

pub mod autograd;
pub mod color;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::{Parameter, Tensor, TensorError};
