//! Dense tensors and reverse-mode differentiation.

mod check;
mod graph;
mod params;
mod real;
mod tensor;

pub use check::{check_all, compare_gradient, finite_diff_check, FD_EPSILON, FD_TOLERANCE};
pub(crate) use graph::Op;
pub use graph::{ElementwiseOp, Graph, Var};
pub use params::{GradientMap, Param, ParamId, ParamSet};
pub use real::{Precision, Real};
pub use tensor::{sigmoid, tanh, Tensor};
