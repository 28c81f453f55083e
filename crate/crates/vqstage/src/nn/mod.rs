//! Dense-tensor reverse-mode autodiff core.
//!
//! Everything trainable in this crate runs through [`Tape`]: a training step
//! injects the current parameter values as leaves, builds the forward graph,
//! calls [`Tape::backward`], and hands the collected gradients to [`AdamW`].
//! Double precision is used by the property tests (finite differences need
//! the headroom); training runs use single precision.

mod checkpoint;
mod gradcheck;
mod kernels;
mod layers;
mod optim;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{load_params, save_params};
pub use gradcheck::gradient_check;
pub use layers::{Conv2d, Embedding, LayerNorm, Linear, ParamId, ParamSet, TapeParams};
pub use optim::{AdamW, LrSchedule};
pub use scalar::{fs, Scalar};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
