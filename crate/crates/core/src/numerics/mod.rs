//! Dense tensors, kernels and the backend abstraction the layers are
//! written against.

mod backend;
pub mod kernels;
mod tensor;

pub use backend::{Backend, Eager};
pub(crate) use backend::{broadcast_binary, concat_cols, concat_rows, sum_cols, sum_rows};
pub use kernels::{causal_dwconv, gelu, matmul, prefix_sum, range_sum, sigmoid, softmax, softplus, transpose};
pub use tensor::{Real, Tensor};
