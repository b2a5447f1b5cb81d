//! Reverse-mode automatic differentiation over dense `f32` tensors with
//! support for gradients of gradients.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{check_coordinates, check_gradients, check_second_order, GradCheck};
pub use graph::{grad, topo_order};
pub use ops::{conv2d, conv2d_input_grad, conv2d_weight_grad};
pub use optim::{sgd_step, SgdConfig, SgdState};
pub use tensor::Tensor;
