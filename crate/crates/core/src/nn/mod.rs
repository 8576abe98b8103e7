//! Minimal reverse-mode autodiff over dense tensors.

pub mod checkpoint;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, Node, NodeId, Param, ParamId, Tape};
pub use ops::{OpKind, CE_CLAMP, DICE_EPS};
pub use tensor::Tensor;
