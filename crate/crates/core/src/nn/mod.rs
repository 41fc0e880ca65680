//! Minimal CNN toolkit: dense tensors and a reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{ConvGeom, Grads, NodeId, ParamTensor, Tape};
pub use tensor::Tensor;
