//! Deterministic f32 tensors with a reverse-mode tape that can differentiate
//! its own backward pass.
//!
//! The tape records every primitive. [`Tape::grad`] walks it backwards and
//! emits the vector-Jacobian products as new primitives on the same tape, so
//! a gradient is itself a differentiable expression. Gradient-matching
//! objectives (loss defined on parameter gradients, optimized over inputs)
//! are built directly on top of this.

mod error;
mod fd;
mod format;
mod kernels;
mod persample;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use fd::finite_difference;
pub use format::{read_ftn1, write_ftn1, FTN1_MAGIC};
pub use persample::{batch_grad, per_sample_grad, SampleLoss};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
