//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`): models train in
//! single precision while gradient checks run in double precision.

mod error;
pub mod kernels;
mod optim;
mod params;
mod scalar;
pub mod scan;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{cosine_lr, AdamW, AdamWConfig, StepOutcome};
pub use params::{ParamId, ParamStore};
pub use scalar::{s, Scalar};
pub use tape::{Gradients, Tape, Var, MASK_FILL};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
