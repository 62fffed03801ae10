#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bytes;
pub mod data;
pub mod error;
pub mod harness;
pub mod incremental;
pub mod losses;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
