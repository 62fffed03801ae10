//! Dense tensors, parameters, and tape-based reverse-mode differentiation.

mod dense;
pub mod gradcheck;
mod kernels;
mod param;
mod tape;

pub use dense::{DType, Scalar, Tensor};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BinaryOp, Gradients, Indices, Tape, UnaryOp, Var};
