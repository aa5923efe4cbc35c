//! Tensors, masks and reverse-mode differentiation.

pub mod graph;
pub mod mask;
pub mod params;
pub mod tensor;

pub use graph::{attention, Gradients, Graph, Var};
pub use params::{checksum, gradient_check, param_grads, Adam, AdamConfig, GradCheckConfig, Parameters};
pub use mask::{make_masks, visible_prefix, AttentionMask, MaskKind};
pub use tensor::{argmax, log_softmax_row, matmul, softmax, Scalar, Tensor};
