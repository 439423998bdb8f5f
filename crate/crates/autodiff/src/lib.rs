//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Tensors are row-major and image tensors use the NCHW layout.
//!
//! Convolutions are lowered to GEMM through im2col, which keeps the substrate
//! fast enough for CPU training of small networks. All kernels are
//! single-threaded and deterministic: identical inputs give bit-identical
//! outputs and gradients.

mod conv;
mod graph;
mod pool;
mod scalar;
mod tensor;

pub use conv::{conv_output_size, conv_transpose_output_size, Conv2dSpec};
pub use graph::{Gradients, Graph, Var};
pub use pool::{roi_bins, RoiCells};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
