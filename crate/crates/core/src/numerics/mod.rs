//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod tensor;

pub mod attention;

pub use attention::{attention, attention_with_key_bias};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{DropoutKind, Graph, Var, LOG_CLAMP};
pub use tensor::{Scalar, Tensor};
