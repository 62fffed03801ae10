//! The forecasting network: strided-convolution encoder, transformer blocks
//! with variable-adaptive mixture-of-experts layers, and a transposed-
//! convolution decoder.

pub mod block;
pub mod cae;
pub mod catalog;
pub mod checkpoint;
pub mod index;
pub mod layers;
mod network;

pub use block::VaMoeBlock;
pub use cae::{ChannelAdaptiveExpert, GateDecision};
pub use catalog::{Stage, VariableCatalog, VariableGroup, VariableKind};
pub use index::IndexEmbedding;
pub use network::*;
