//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{warmup_cosine_lr, AdamW, AdamWConfig};
pub use params::{sum_grads, Param, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
