//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

mod graph;
pub mod gradcheck;
pub mod ops;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{apply, OpKind};
pub use tensor::{argmax, Tensor};
pub(crate) use tensor::gemm;
