//! Minimal channel-major tensors, layers with hand-written backward passes,
//! and the optimizer used by every training stage.

mod layers;
mod optim;
mod tensor;

pub(crate) use layers::composite_module;
pub use layers::{join, BatchNorm2d, Conv2d, Layer, Module, Param, Pass, Seq};
pub use optim::{clip_grad_norm, state_hash, AdamW};
pub use tensor::{gemm, Tensor};
