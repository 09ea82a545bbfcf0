//! Dense tensors, a reverse-mode tape and finite-difference checking.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{compare_gradients, finite_diff_check, relative_error, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{permute_tensor, Gradients, Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{gelu, gelu_scalar, layer_norm, matmul, softmax_rows, Tensor, LAYER_NORM_EPS};

#[cfg(test)]
mod properties;
